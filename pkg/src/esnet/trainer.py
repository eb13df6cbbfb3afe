"""Training loop: schedule, per-step erase pipeline, probe, checkpoints.

One training step runs at most two backward passes: an optional saliency
backward that turns the batch confidence score into per-image maps, and the
loss backward that feeds the optimizer. The step counter in the metrics
stream is produced by instrumenting the autograd entry points, not by
trusting the code path.

Every source of randomness is a named, seeded stream derived from
(seed, purpose, epoch, step), so two runs with the same seed produce
identical numbers regardless of how data loading is organized.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np
import torch

from . import losses
from .besm import (BesmConfig, RandomErasingParams, batch_salient_maps, batch_score, erase,
                   pair_scores, random_erasing, resize_maps_to_images)
from .data import ImageStore, SamplerConfig, batch_tensors, pk_sampler, relabel_pids, split_samples
from .errors import ConfigError, NumericError, SamplerContractError
from .losses import LossBundle, TripletConfig, batch_hard_triplet, id_loss
from .model import Model, save_checkpoint
from .saliency import gradcam_maps_from_logits, maps_from_score

# Stream ids keeping the named RNG streams apart.
_STREAM_PROBE, _STREAM_EPOCH, _STREAM_AUGMENT, _STREAM_ERASE = 7, 11, 13, 17


@dataclass
class TrainConfig:
    epochs: int = 120
    base_lr: float = 3.5e-4
    warmup_epochs: int = 10
    decay_epochs: tuple[int, ...] = (40, 70)
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    margin: float = 0.3
    besm: BesmConfig = field(default_factory=BesmConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    random_erasing: RandomErasingParams = field(default_factory=RandomErasingParams)
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.epochs <= 0:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs must satisfy 0 <= warmup < epochs, got {self.warmup_epochs}"
            )
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError(f"decay epochs must be strictly increasing: {self.decay_epochs}")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class ProbeRecord:
    epoch: int
    loss_on_erased: float
    loss_on_clean: float


class BackwardPassCounter:
    """Counts entries into the autograd engine while active.

    Patches ``torch.autograd.backward`` and ``torch.autograd.grad``, which
    every backward pass (including ``Tensor.backward``) goes through, so
    hidden extra passes anywhere in the step are counted too.
    """

    def __init__(self):
        self.count = 0

    def __enter__(self):
        self._backward = torch.autograd.backward
        self._grad = torch.autograd.grad

        def counted_backward(*args, **kwargs):
            self.count += 1
            return self._backward(*args, **kwargs)

        def counted_grad(*args, **kwargs):
            self.count += 1
            return self._grad(*args, **kwargs)

        torch.autograd.backward = counted_backward
        torch.autograd.grad = counted_grad
        return self

    def __exit__(self, *exc):
        torch.autograd.backward = self._backward
        torch.autograd.grad = self._grad
        return False


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Learning rate at a global step: linear warmup, then staged decay.

    Decayed plateau values are computed in decimal so that, e.g., a 3.5e-4
    base with factor 0.1 lands on 3.5e-5 and 3.5e-6 exactly.
    """
    if step < 0:
        raise ConfigError("step must be >= 0")
    epoch = step / steps_per_epoch
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.base_lr * epoch / cfg.warmup_epochs
    n_decays = sum(1 for d in cfg.decay_epochs if epoch >= d)
    if n_decays == 0:
        return cfg.base_lr
    return float(Decimal(repr(cfg.base_lr)) * Decimal(repr(cfg.decay_factor)) ** n_decays)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def _four_losses(aib_logits, aib_emb, esb_logits, esb_emb, labels, margin):
    tcfg = TripletConfig(margin)
    return (
        id_loss(esb_logits, labels),
        batch_hard_triplet(esb_emb, labels, tcfg),
        id_loss(aib_logits, labels),
        batch_hard_triplet(aib_emb, labels, tcfg),
    )


def train_step(model: Model, images: torch.Tensor, labels: torch.Tensor,
               cfg: TrainConfig, optimizer: torch.optim.Optimizer, lr: float,
               erase_rng: np.random.Generator) -> tuple[LossBundle, int]:
    """One optimizer step; returns the loss bundle and the counted backward passes.

    Pipeline with saliency-guided erasing active: (1) clean images through
    the stem and both branches with the tap captured, (2) pairing + batch
    score + one backward to the tapped maps + top-R erasing, (3) erased
    images through stem + ESB, (4) four-term loss (AIB terms from the clean
    pass, ESB terms from the erased pass), (5) one loss backward and the
    optimizer step, then the pooling exponent clamp.
    """
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = lr

    mode = cfg.besm.mode
    h, w = images.shape[2], images.shape[3]
    with BackwardPassCounter() as counter:
        if mode in ("cgram", "gradcam"):
            tap = cfg.besm.layer or model.default_tap()
            full = model.forward_full(images, tap=tap)
            if mode == "cgram":
                _, scores = pair_scores(full.esb.embedding, labels)
                maps = maps_from_score(batch_score(scores), full.tapped, retain_graph=True)
            else:
                maps = gradcam_maps_from_logits(full.esb.logits, full.tapped, labels,
                                                retain_graph=True)
            maps_img = resize_maps_to_images(maps, (h, w))
            erased, _, _ = erase(images, maps_img, cfg.besm, erase_rng)
            esb_out = model.forward_branch(erased, "esb")
            aib_out = full.aib
        elif mode == "random":
            aib_out = model.forward_branch(images, "aib")
            erased = random_erasing(images, erase_rng, cfg.random_erasing)
            esb_out = model.forward_branch(erased, "esb")
        else:  # off
            full = model.forward_full(images)
            aib_out, esb_out = full.aib, full.esb

        parts = _four_losses(aib_out.logits, aib_out.embedding,
                             esb_out.logits, esb_out.embedding, labels, cfg.margin)
        total = parts[0] + parts[1] + parts[2] + parts[3]
        if not torch.isfinite(total):
            raise NumericError(
                "non-finite loss: "
                + ", ".join(f"{name}={float(v.detach())!r}" for name, v in
                            zip(("esb_id", "esb_tri", "aib_id", "aib_tri"), parts))
            )
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        model.clamp_pooling()

    bundle = LossBundle(*(float(p.detach()) for p in parts))
    return bundle, counter.count


def _probe_loss(model: Model, images: torch.Tensor, labels: torch.Tensor,
                margin: float) -> float:
    """Four-term loss with the same images fed to both branches; no update."""
    with torch.no_grad():
        out = model.forward_full(images)
        parts = _four_losses(out.aib.logits, out.aib.embedding,
                             out.esb.logits, out.esb.embedding, labels, margin)
        return float(parts[0] + parts[1] + parts[2] + parts[3])


def erasure_sensitivity_probe(model: Model, images: torch.Tensor, labels: torch.Tensor,
                              cfg: TrainConfig, epoch: int = 0) -> ProbeRecord:
    """Loss on the salient-erased probe batch vs. on the clean batch.

    Erasing is forced for every probe image (the Bernoulli trigger would only
    add noise to the curve) and always uses the score-gradient maps, whatever
    the training-time erase mode, since the probe asks how much the model
    relies on its currently-salient regions. No parameter or buffer changes.
    """
    was_training = model.training
    model.eval()
    try:
        maps = batch_salient_maps(model, images, labels, cfg.besm)
        maps_img = resize_maps_to_images(maps, (images.shape[2], images.shape[3]))
        forced = BesmConfig(R=cfg.besm.R, P=1.0, layer=cfg.besm.layer, mode="cgram")
        erased, _, _ = erase(images, maps_img, forced, np.random.default_rng(0))
        loss_erased = _probe_loss(model, erased, labels, cfg.margin)
        loss_clean = _probe_loss(model, images, labels, cfg.margin)
    finally:
        model.train(was_training)
    return ProbeRecord(epoch=epoch, loss_on_erased=loss_erased, loss_on_clean=loss_clean)


@dataclass
class FitResult:
    run_dir: Path
    final_checkpoint: Path
    best_checkpoint: Path
    metrics_path: Path
    probe_path: Path
    steps: int
    final_loss: float
    label_map: dict[int, int]


METRIC_COLUMNS = ("step", "lr", "L_total", "L_ESB_id", "L_ESB_triplet",
                  "L_AIB_id", "L_AIB_triplet", "backward_passes")


def fit(model: Model, samples, cfg: TrainConfig, run_dir,
        store: ImageStore | None = None, config_echo: dict | None = None) -> FitResult:
    """Train on the ``train`` split of ``samples`` and write run artifacts.

    The run directory receives metrics.csv (one row per step), probe.csv
    (one row per epoch), periodic checkpoints, a best-by-probe checkpoint
    (lowest loss on the erased probe batch), and final.pt.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    store = store or ImageStore()

    train_samples = split_samples(samples, "train")
    if not train_samples:
        raise SamplerContractError("no training samples")
    label_map = relabel_pids(train_samples)
    if model.num_identities != len(label_map):
        raise ConfigError(
            f"model classifier covers {model.num_identities} identities, "
            f"dataset has {len(label_map)}"
        )
    size = tuple(model.cfg.input_size)

    def tensors(indices, rng, mode):
        images, pids, _ = batch_tensors(train_samples, indices, store, rng, mode, size)
        labels = torch.tensor([label_map[int(p)] for p in pids], dtype=torch.long)
        return images, labels

    # Fixed held-out probe batch: drawn once, excluded from the training pool.
    probe_rng = _stream(cfg.seed, _STREAM_PROBE)
    probe_indices = pk_sampler(train_samples, cfg.sampler, probe_rng)[0]
    probe_images, probe_labels = tensors(probe_indices, None, "test")
    pool = [s for i, s in enumerate(train_samples) if i not in set(probe_indices)]
    pool_pids = {s.pid for s in pool}
    if len(pool_pids) < cfg.sampler.J:
        raise SamplerContractError(
            f"holding out the probe batch leaves {len(pool_pids)} identities, "
            f"fewer than J={cfg.sampler.J}"
        )

    def pool_tensors(indices, rng):
        images, pids, _ = batch_tensors(pool, indices, store, rng, "train", size)
        labels = torch.tensor([label_map[int(p)] for p in pids], dtype=torch.long)
        return images, labels

    optimizer = torch.optim.Adam(model.parameters(), lr=0.0, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, len({s.pid for s in pool}) // cfg.sampler.J)

    metrics_rows: list[dict] = []
    probe_rows: list[ProbeRecord] = []
    best_probe = math.inf
    best_path = run_dir / "checkpoints" / "best.pt"
    step = 0
    try:
        for epoch in range(cfg.epochs):
            batches = pk_sampler(pool, cfg.sampler, _stream(cfg.seed, _STREAM_EPOCH, epoch))
            for b, batch in enumerate(batches):
                images, labels = pool_tensors(batch, _stream(cfg.seed, _STREAM_AUGMENT, epoch, b))
                lr = lr_at(step, cfg, steps_per_epoch)
                bundle, n_back = train_step(
                    model, images, labels, cfg, optimizer, lr,
                    _stream(cfg.seed, _STREAM_ERASE, epoch, b),
                )
                row = {"step": step, "lr": lr, "backward_passes": n_back}
                row.update(bundle.as_row())
                metrics_rows.append(row)
                step += 1

            record = erasure_sensitivity_probe(model, probe_images, probe_labels, cfg, epoch)
            probe_rows.append(record)
            if record.loss_on_erased < best_probe:
                best_probe = record.loss_on_erased
                save_checkpoint(model, best_path, config_echo, {"epoch": epoch})
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, run_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.pt",
                                config_echo, {"epoch": epoch})
    except NumericError as exc:
        (run_dir / "diagnostic.json").write_text(json.dumps(
            {"error": str(exc), "step": step}, indent=2))
        raise

    final_path = run_dir / "final.pt"
    save_checkpoint(model, final_path, config_echo, {"epoch": cfg.epochs - 1})
    if not best_path.exists():
        save_checkpoint(model, best_path, config_echo, {"epoch": cfg.epochs - 1})

    metrics_path = run_dir / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in metrics_rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    probe_path = run_dir / "probe.csv"
    with open(probe_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_on_erased", "loss_on_clean"])
        for rec in probe_rows:
            writer.writerow([rec.epoch, repr(rec.loss_on_erased), repr(rec.loss_on_clean)])

    return FitResult(
        run_dir=run_dir,
        final_checkpoint=final_path,
        best_checkpoint=best_path,
        metrics_path=metrics_path,
        probe_path=probe_path,
        steps=step,
        final_loss=metrics_rows[-1]["L_total"] if metrics_rows else math.nan,
        label_map=label_map,
    )
