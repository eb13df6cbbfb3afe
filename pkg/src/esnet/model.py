"""Two-branch embedding model with a shared stem and named layer taps.

The stem (first ``stem_stages`` conv stages) is shared by parameter identity
between the all-information branch (AIB) and the erasing-salient branch
(ESB); each branch then owns exclusive copies of the remaining stages plus a
head (global pooling, optional BN bottleneck, identity classifier). Every
stage output can be captured through a string tap so downstream code can ask
autograd for gradients of any scalar with respect to that feature map.

Conventions: the pre-bottleneck pooled vector feeds the triplet loss, the
post-bottleneck vector feeds the classifier and retrieval. The retrieval
descriptor of an image is the concatenation of both branches' post-BN
embeddings, each averaged over the image and its horizontal flip and then
L2-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractViolationError, DataError, TapResolutionError

CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    stem_stages: int = 2
    input_size: tuple[int, int] = (384, 128)  # (H, W)
    last_stage_stride: int = 1

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_size = tuple(int(x) for x in self.input_size)
        if any(c <= 0 for c in self.stage_channels):
            raise ConfigError(f"stage channels must be positive: {self.stage_channels}")
        if not 1 <= self.stem_stages < len(self.stage_channels):
            raise ConfigError(
                f"stem_stages must leave each branch >= 1 exclusive stage: "
                f"stem={self.stem_stages}, total={len(self.stage_channels)}"
            )
        if any(x <= 0 for x in self.input_size):
            raise ConfigError(f"input size must be positive: {self.input_size}")


@dataclass
class HeadConfig:
    pooling: str = "gap"       # gap | gmp | ppool
    embedding_dim: int = 128
    bn_neck: bool = True
    ppool_l_init: float = 3.0
    ppool_l_min: float = 1.0
    ppool_l_max: float = 20.0
    ppool_eps: float = 1e-6

    def __post_init__(self):
        if self.pooling not in ("gap", "gmp", "ppool"):
            raise ConfigError(f"unknown pooling mode {self.pooling!r}")
        if self.embedding_dim <= 0:
            raise ConfigError(f"embedding_dim must be positive: {self.embedding_dim}")


@dataclass
class LayerTap:
    name: str


class PPool2d(nn.Module):
    """Trainable Lehmer-mean global pool over (N, C, H, W) maps.

    Same formula as ``pooling.ppool_forward``; evaluated in log space with
    the exponent as a learnable parameter so autograd provides both input
    and exponent gradients. ``clamp_exponent`` is called by the trainer
    after every optimizer step.
    """

    def __init__(self, l_init=3.0, l_min=1.0, l_max=20.0, eps=1e-6):
        super().__init__()
        self.l = nn.Parameter(torch.tensor(float(l_init)))
        self.l_min = float(l_min)
        self.l_max = float(l_max)
        self.eps = float(eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if (x < 0).any():
            raise ContractViolationError(
                "pooling input has negative values; the upstream rectifier is missing"
            )
        t = x.clamp(min=self.eps).log().flatten(2)
        num = torch.logsumexp(self.l * t, dim=2)
        den = torch.logsumexp((self.l - 1.0) * t, dim=2)
        return (num - den).exp()

    def clamp_exponent(self) -> None:
        with torch.no_grad():
            self.l.clamp_(self.l_min, self.l_max)

    def extra_repr(self) -> str:
        return f"l={float(self.l):.4g}, range=[{self.l_min}, {self.l_max}]"


class GapPool2d(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3))


class GmpPool2d(nn.Module):
    def forward(self, x):
        return x.amax(dim=(2, 3))


def make_pool(cfg: HeadConfig) -> nn.Module:
    if cfg.pooling == "gap":
        return GapPool2d()
    if cfg.pooling == "gmp":
        return GmpPool2d()
    return PPool2d(cfg.ppool_l_init, cfg.ppool_l_min, cfg.ppool_l_max, cfg.ppool_eps)


class BranchHead(nn.Module):
    """Pool -> (optional projection) -> BN bottleneck -> classifier."""

    def __init__(self, in_channels: int, cfg: HeadConfig, num_identities: int):
        super().__init__()
        self.cfg = cfg
        self.pool = make_pool(cfg)
        if cfg.embedding_dim != in_channels:
            self.project = nn.Linear(in_channels, cfg.embedding_dim, bias=False)
        else:
            self.project = nn.Identity()
        self.bottleneck = nn.BatchNorm1d(cfg.embedding_dim) if cfg.bn_neck else nn.Identity()
        self.classifier = nn.Linear(cfg.embedding_dim, num_identities, bias=False)

    def forward(self, fmap: torch.Tensor):
        embedding = self.project(self.pool(fmap))
        bn_embedding = self.bottleneck(embedding)
        logits = self.classifier(bn_embedding)
        return embedding, bn_embedding, logits


def _stage(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


@dataclass
class BranchOutput:
    embedding: torch.Tensor      # pre-bottleneck, triplet input
    bn_embedding: torch.Tensor   # post-bottleneck, classifier/retrieval input
    logits: torch.Tensor
    tapped: torch.Tensor | None = None


@dataclass
class FullOutput:
    aib: BranchOutput
    esb: BranchOutput
    tapped: torch.Tensor | None = None


class Model(nn.Module):
    def __init__(self, cfg: BackboneConfig, aib_head: HeadConfig, esb_head: HeadConfig,
                 num_identities: int):
        super().__init__()
        if num_identities <= 0:
            raise ConfigError(f"num_identities must be positive: {num_identities}")
        self.cfg = cfg
        self.num_identities = num_identities

        channels = cfg.stage_channels
        n = len(channels)
        strides = [2] * (n - 1) + [cfg.last_stage_stride]
        ins = (3,) + channels[:-1]

        self.stem = nn.ModuleList(
            _stage(ins[i], channels[i], strides[i]) for i in range(cfg.stem_stages)
        )
        branch_range = range(cfg.stem_stages, n)
        self.aib_stages = nn.ModuleList(_stage(ins[i], channels[i], strides[i]) for i in branch_range)
        self.esb_stages = nn.ModuleList(_stage(ins[i], channels[i], strides[i]) for i in branch_range)
        self.aib_head = BranchHead(channels[-1], aib_head, num_identities)
        self.esb_head = BranchHead(channels[-1], esb_head, num_identities)

    # ---- taps ------------------------------------------------------------

    def tap_names(self) -> list[str]:
        names = [f"stem.stage{i + 1}" for i in range(len(self.stem))]
        for branch in ("aib", "esb"):
            names += [
                f"{branch}.stage{len(self.stem) + i + 1}"
                for i in range(len(self.aib_stages))
            ]
        return names

    def resolve_tap(self, tap) -> str:
        name = tap.name if isinstance(tap, LayerTap) else tap
        if name not in self.tap_names():
            raise TapResolutionError(
                f"tap {name!r} does not name a layer; known taps: {self.tap_names()}"
            )
        return name

    def default_tap(self) -> str:
        return f"esb.stage{len(self.cfg.stage_channels)}"

    # ---- forward paths ---------------------------------------------------

    def _run_stem(self, x: torch.Tensor, captures: dict) -> torch.Tensor:
        for i, stage in enumerate(self.stem):
            x = stage(x)
            captures[f"stem.stage{i + 1}"] = x
        return x

    def _run_branch(self, branch: str, x: torch.Tensor, captures: dict) -> BranchOutput:
        stages = self.aib_stages if branch == "aib" else self.esb_stages
        head = self.aib_head if branch == "aib" else self.esb_head
        for i, stage in enumerate(stages):
            x = stage(x)
            captures[f"{branch}.stage{len(self.stem) + i + 1}"] = x
        embedding, bn_embedding, logits = head(x)
        return BranchOutput(embedding, bn_embedding, logits)

    def forward_branch(self, images: torch.Tensor, branch: str, tap=None) -> BranchOutput:
        """Run stem plus one branch; capture the tapped map if requested."""
        if branch not in ("aib", "esb"):
            raise ConfigError(f"branch must be 'aib' or 'esb', got {branch!r}")
        self._check_input(images)
        name = self.resolve_tap(tap) if tap is not None else None
        if name is not None and not (name.startswith("stem.") or name.startswith(branch)):
            raise TapResolutionError(f"tap {name!r} is not on the {branch} path")
        captures: dict = {}
        x = self._run_stem(images, captures)
        out = self._run_branch(branch, x, captures)
        if name is not None:
            out.tapped = captures[name]
        return out

    def forward_full(self, images: torch.Tensor, tap=None) -> FullOutput:
        """Run stem once, then both branches; tap may name any layer."""
        self._check_input(images)
        name = self.resolve_tap(tap) if tap is not None else None
        captures: dict = {}
        x = self._run_stem(images, captures)
        aib = self._run_branch("aib", x, captures)
        esb = self._run_branch("esb", x, captures)
        return FullOutput(aib, esb, captures[name] if name is not None else None)

    def forward(self, images: torch.Tensor, tap=None) -> FullOutput:
        return self.forward_full(images, tap=tap)

    def _check_input(self, images: torch.Tensor) -> None:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ConfigError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        if tuple(images.shape[2:]) != tuple(self.cfg.input_size):
            raise ConfigError(
                f"image size {tuple(images.shape[2:])} does not match configured "
                f"input size {tuple(self.cfg.input_size)}"
            )

    # ---- inference -------------------------------------------------------

    def _branch_descriptor_halves(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.forward_full(images)
        return out.aib.bn_embedding, out.esb.bn_embedding

    def infer_descriptor(self, image: torch.Tensor) -> torch.Tensor:
        """Flip-averaged, per-branch normalized, concatenated descriptor."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                x = image.unsqueeze(0) if image.ndim == 3 else image
                flipped = torch.flip(x, dims=[3])
                a1, e1 = self._branch_descriptor_halves(x)
                a2, e2 = self._branch_descriptor_halves(flipped)
                aib = F.normalize((a1 + a2) / 2.0, dim=1)
                esb = F.normalize((e1 + e2) / 2.0, dim=1)
                return torch.cat([aib, esb], dim=1).squeeze(0)
        finally:
            self.train(was_training)

    # ---- saliency hooks (narrow protocol used by the saliency module) -----

    def tapped_descriptor(self, image: torch.Tensor, tap=None):
        """Single grad-enabled forward: (retrieval-style descriptor, tapped map).

        No flip averaging here; the descriptor is the concatenation of both
        branches' L2-normalized post-BN embeddings of this one forward, so
        the score gradient reaches the tapped map through one clean graph.
        """
        name = self.resolve_tap(tap) if tap is not None else self.default_tap()
        x = image.unsqueeze(0) if image.ndim == 3 else image
        out = self.forward_full(x, tap=name)
        desc = torch.cat(
            [F.normalize(out.aib.bn_embedding, dim=1), F.normalize(out.esb.bn_embedding, dim=1)],
            dim=1,
        ).squeeze(0)
        return desc, out.tapped

    def tapped_logits(self, image: torch.Tensor, tap=None, branch: str = "esb"):
        name = self.resolve_tap(tap) if tap is not None else self.default_tap()
        x = image.unsqueeze(0) if image.ndim == 3 else image
        out = self.forward_branch(x, branch, tap=name)
        return out.logits, out.tapped

    # ---- bookkeeping -------------------------------------------------------

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def clamp_pooling(self) -> None:
        for module in self.modules():
            if isinstance(module, PPool2d):
                module.clamp_exponent()


def build_model(cfg: BackboneConfig, aib_head: HeadConfig, esb_head: HeadConfig,
                num_identities: int, seed: int = 0) -> Model:
    """Construct a model with seed-deterministic initial parameters."""
    torch.manual_seed(seed)
    return Model(cfg, aib_head, esb_head, num_identities)


# ---- checkpoints -----------------------------------------------------------


def _head_dict(cfg: HeadConfig) -> dict:
    return {
        "pooling": cfg.pooling,
        "embedding_dim": cfg.embedding_dim,
        "bn_neck": cfg.bn_neck,
        "ppool_l_init": cfg.ppool_l_init,
        "ppool_l_min": cfg.ppool_l_min,
        "ppool_l_max": cfg.ppool_l_max,
        "ppool_eps": cfg.ppool_eps,
    }


def save_checkpoint(model: Model, path, config_echo: dict | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model": {
            "backbone": {
                "stage_channels": list(model.cfg.stage_channels),
                "stem_stages": model.cfg.stem_stages,
                "input_size": list(model.cfg.input_size),
                "last_stage_stride": model.cfg.last_stage_stride,
            },
            "aib_head": _head_dict(model.aib_head.cfg),
            "esb_head": _head_dict(model.esb_head.cfg),
            "num_identities": model.num_identities,
        },
        "state_dict": model.state_dict(),
        "pooling_exponents": {
            name: float(module.l.detach())
            for name, module in model.named_modules()
            if isinstance(module, PPool2d)
        },
        "config_echo": config_echo or {},
        "rng": {"torch": torch.get_rng_state()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        version = payload["version"]
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        spec = payload["model"]
        model = Model(
            BackboneConfig(
                stage_channels=tuple(spec["backbone"]["stage_channels"]),
                stem_stages=spec["backbone"]["stem_stages"],
                input_size=tuple(spec["backbone"]["input_size"]),
                last_stage_stride=spec["backbone"]["last_stage_stride"],
            ),
            HeadConfig(**spec["aib_head"]),
            HeadConfig(**spec["esb_head"]),
            spec["num_identities"],
        )
        model.load_state_dict(payload["state_dict"], strict=True)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"failed to load checkpoint {path}: {exc}") from exc
    model.eval()
    return model, payload
