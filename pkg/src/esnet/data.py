"""Dataset ingestion, identity-balanced batch sampling, and augmentation.

Dataset roots follow the common re-identification convention: ``train/``,
``query/`` and ``gallery/`` subdirectories holding images named
``<pid>_c<cam>_<anything>.<ext>``. Batches are J distinct identities times K
instances each; identities with fewer than K images are filled by resampling
with replacement. All randomness comes from caller-provided generators so
epoch order is seeded-deterministic.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError, InvalidInputError, SamplerContractError

log = logging.getLogger(__name__)

NORMALIZE_MEAN = (0.485, 0.456, 0.406)
NORMALIZE_STD = (0.229, 0.224, 0.225)

SPLITS = ("train", "query", "gallery")
_NAME_RE = re.compile(r"^(\d+)_c(\d+)_\S*\.(png|jpg|jpeg|bmp)$", re.IGNORECASE)


@dataclass
class ReidSample:
    path: Path
    pid: int
    cam: int
    split: str

    def __post_init__(self):
        if self.pid < 0 or self.cam < 0:
            raise InvalidInputError(f"pid/cam must be nonnegative: {self.pid}/{self.cam}")


@dataclass
class SamplerConfig:
    J: int = 16  # identities per batch
    K: int = 4   # instances per identity

    def __post_init__(self):
        if self.J < 2 or self.K < 2:
            raise InvalidInputError(
                f"need J >= 2 and K >= 2 for the triplet/pairing contracts, got J={self.J} K={self.K}"
            )


def parse_sample_name(name: str):
    """(pid, cam) from a convention-following file name, else None."""
    m = _NAME_RE.match(name)
    if not m:
        return None
    return int(m.group(1)), int(m.group(2))


def ingest_directory(root) -> list[ReidSample]:
    """Parse a dataset root into samples; malformed names are warned and skipped."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    samples: list[ReidSample] = []
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            raise DataError(f"missing split directory: {split_dir}")
        count = 0
        for path in sorted(split_dir.iterdir()):
            if not path.is_file():
                continue
            parsed = parse_sample_name(path.name)
            if parsed is None:
                log.warning("skipping unparseable file name %s", path)
                continue
            pid, cam = parsed
            samples.append(ReidSample(path=path, pid=pid, cam=cam, split=split))
            count += 1
        if count == 0:
            raise DataError(f"split {split!r} under {root} holds no usable images")
    return samples


def split_samples(samples: list[ReidSample], split: str) -> list[ReidSample]:
    return [s for s in samples if s.split == split]


def pk_sampler(samples: list[ReidSample], cfg: SamplerConfig,
               rng: np.random.Generator) -> list[list[int]]:
    """One epoch of J x K batches as lists of indices into ``samples``.

    Identities are shuffled, grouped J at a time (the remainder is dropped
    this epoch; the next epoch reshuffles), and each contributes K instances.
    """
    by_pid: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_pid.setdefault(s.pid, []).append(i)
    pids = sorted(by_pid)
    if len(pids) < cfg.J:
        raise SamplerContractError(
            f"need at least J={cfg.J} identities, dataset has {len(pids)}"
        )
    order = rng.permutation(len(pids))
    batches = []
    for start in range(0, len(pids) - cfg.J + 1, cfg.J):
        batch: list[int] = []
        for oi in order[start:start + cfg.J]:
            pool = by_pid[pids[oi]]
            if len(pool) >= cfg.K:
                picks = rng.choice(len(pool), size=cfg.K, replace=False)
            else:
                picks = rng.choice(len(pool), size=cfg.K, replace=True)
            batch.extend(pool[int(p)] for p in picks)
        batches.append(batch)
    return batches


class ImageStore:
    """Decode-once cache of dataset images as (H, W, 3) uint8 arrays."""

    def __init__(self):
        self._cache: dict[Path, np.ndarray] = {}

    def get(self, sample: ReidSample) -> np.ndarray:
        arr = self._cache.get(sample.path)
        if arr is None:
            try:
                with Image.open(sample.path) as img:
                    arr = np.asarray(img.convert("RGB"))
            except Exception as exc:
                raise DataError(f"cannot decode image {sample.path}: {exc}") from exc
            self._cache[sample.path] = arr
        return arr


def hflip(image: torch.Tensor) -> torch.Tensor:
    """Left-right flip of a (..., H, W) tensor; applying it twice is identity."""
    return torch.flip(image, dims=[-1])


def augment(image: np.ndarray, rng: np.random.Generator | None, mode: str,
            size: tuple[int, int] = (384, 128), flip_prob: float = 0.5,
            mean=NORMALIZE_MEAN, std=NORMALIZE_STD) -> torch.Tensor:
    """Resize + (train-only random flip) + channel normalization.

    ``size`` is (H, W); the default is the person preset. Test mode ignores
    the rng and is fully deterministic.
    """
    if mode not in ("train", "test"):
        raise InvalidInputError(f"augment mode must be train or test, got {mode!r}")
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    h, w = size
    pil = Image.fromarray(arr.astype(np.uint8))
    if pil.size != (w, h):
        pil = pil.resize((w, h), Image.BILINEAR)
    x = torch.from_numpy(np.asarray(pil, dtype=np.float32) / 255.0).permute(2, 0, 1)
    if mode == "train":
        if rng is None:
            raise InvalidInputError("train-mode augmentation needs an rng")
        if rng.random() < flip_prob:
            x = hflip(x)
    mean_t = torch.tensor(mean, dtype=torch.float32).view(3, 1, 1)
    std_t = torch.tensor(std, dtype=torch.float32).view(3, 1, 1)
    return (x - mean_t) / std_t


def batch_tensors(samples: list[ReidSample], indices: list[int], store: ImageStore,
                  rng: np.random.Generator | None, mode: str,
                  size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack augmented images plus pid and cam tensors for a batch."""
    images = torch.stack([augment(store.get(samples[i]), rng, mode, size) for i in indices])
    pids = torch.tensor([samples[i].pid for i in indices], dtype=torch.long)
    cams = torch.tensor([samples[i].cam for i in indices], dtype=torch.long)
    return images, pids, cams


def make_test_loader(store: ImageStore, size: tuple[int, int]):
    """Sample -> deterministic test-augmented image tensor."""

    def load(sample: ReidSample) -> torch.Tensor:
        return augment(store.get(sample), None, "test", size)

    return load


def relabel_pids(samples: list[ReidSample]) -> dict[int, int]:
    """Contiguous 0-based training labels for classifier heads."""
    pids = sorted({s.pid for s in samples})
    return {pid: i for i, pid in enumerate(pids)}
