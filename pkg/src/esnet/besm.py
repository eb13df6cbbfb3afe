"""Salient-part erasing for mini-batch training.

Per batch: every sample is paired with its easiest positive (the closest
same-identity sample by cosine distance), pair scores are aggregated into a
single weighted batch score, one extra backward pass turns that score into a
salient map per image, and with probability P per image the top-R fraction
of pixels (ranked by the image-resolution map) is set to the erase value.

The e^S pair weights are treated as constants: gradients flow only through
the linear score factor, so the map semantics stay those of the plain score
gradient. Erasing happens on normalized image tensors with erase value 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, SamplerContractError
from .saliency import bilinear_resize, maps_from_score

ERASE_VALUE = 0.0


@dataclass
class BesmConfig:
    R: float = 0.10          # fraction of image pixels to erase
    P: float = 0.3           # per-image trigger probability
    layer: str | None = None  # tap name; None = the model's default tap
    mode: str = "cgram"      # cgram | gradcam | random | off

    def __post_init__(self):
        if not 0.0 <= self.R < 1.0:
            raise ConfigError(f"erase ratio R must be in [0, 1), got {self.R}")
        if not 0.0 <= self.P <= 1.0:
            raise ConfigError(f"erase probability P must be in [0, 1], got {self.P}")
        if self.mode not in ("cgram", "gradcam", "random", "off"):
            raise ConfigError(f"unknown besm mode {self.mode!r}")


@dataclass
class RandomErasingParams:
    probability: float = 0.5
    area_range: tuple[float, float] = (0.02, 0.4)
    aspect_range: tuple[float, float] = (0.3, 1.0 / 0.3)
    value: float = 0.0


def easiest_positive(embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Index of the closest distinct same-label sample, per sample.

    Distance is cosine distance (1 - cosine similarity); ties break toward
    the smallest index. Requires every label to appear at least twice (a
    single-identity batch is fine here, unlike for the triplet loss).
    """
    uniq, counts = torch.unique(labels, return_counts=True)
    if (counts < 2).any():
        bad = uniq[counts < 2].tolist()
        raise SamplerContractError(f"labels with a single instance in the batch: {bad}")
    with torch.no_grad():
        en = F.normalize(embeddings.detach(), dim=1)
        dist = (1.0 - en @ en.T).cpu().numpy().astype(np.float64)
    lab = labels.cpu().numpy()
    n = len(lab)
    same = lab[None, :] == lab[:, None]
    np.fill_diagonal(same, False)
    dist[~same] = np.inf
    idx = dist.argmin(axis=1)  # first occurrence wins on ties
    if any(idx == np.arange(n)):
        raise SamplerContractError("self-pairing should be impossible; check labels")
    return torch.from_numpy(idx.astype(np.int64))


def pair_scores(embeddings: torch.Tensor, labels: torch.Tensor):
    """Easiest-positive pairing plus per-pair cosine scores (grad-carrying)."""
    idx = easiest_positive(embeddings, labels)
    en = F.normalize(embeddings, dim=1)
    scores = (en * en[idx]).sum(dim=1)
    return idx, scores


def batch_score(scores: torch.Tensor) -> torch.Tensor:
    """Weighted sum of pair scores; the e^S weights are constants."""
    return (scores.detach().exp() * scores).sum()


def batch_salient_maps(model, images: torch.Tensor, labels: torch.Tensor,
                       cfg: BesmConfig | None = None) -> torch.Tensor:
    """Salient maps for a whole batch from one extra backward pass.

    Runs stem + ESB on the full images in eval mode, pairs on the ESB
    pre-bottleneck embeddings, backpropagates the batch score to the tapped
    maps, and returns detached (N, h, w) maps. The model is left exactly as
    found (parameters and buffers untouched).
    """
    cfg = cfg or BesmConfig()
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            tap = cfg.layer or model.default_tap()
            out = model.forward_branch(images, "esb", tap=tap)
            _, scores = pair_scores(out.embedding, labels)
            total = batch_score(scores)
            maps = maps_from_score(total, out.tapped)
    finally:
        model.train(was_training)
    return maps.detach()


def top_erase_count(R: float, height: int, width: int) -> int:
    return math.ceil(R * height * width)


def erase(images: torch.Tensor, maps_image_res, cfg: BesmConfig,
          rng: np.random.Generator):
    """Zero the top-R pixels of triggered images.

    ``maps_image_res`` must already be at image resolution (N, H, W). For
    each image an independent uniform draw against P decides whether to
    erase; when triggered, exactly ceil(R*H*W) positions are zeroed across
    all channels: the largest map values, ties broken in row-major order.

    Returns (erased images, bool masks (N, H, W), bool trigger flags (N,)).
    """
    if images.ndim != 4:
        raise ConfigError(f"expected (N, C, H, W) images, got {tuple(images.shape)}")
    n_img, _, height, width = images.shape
    maps = np.asarray(
        maps_image_res.detach().cpu().numpy()
        if isinstance(maps_image_res, torch.Tensor) else maps_image_res,
        dtype=np.float64,
    )
    if maps.shape != (n_img, height, width):
        raise ConfigError(
            f"maps shape {maps.shape} does not match images {(n_img, height, width)}"
        )
    n_erase = top_erase_count(cfg.R, height, width)
    if n_erase >= height * width and n_erase > 0:
        raise ConfigError(f"R={cfg.R} would erase every pixel of a {height}x{width} image")

    out = images.clone()
    masks = np.zeros((n_img, height, width), dtype=bool)
    triggered = np.zeros(n_img, dtype=bool)
    for i in range(n_img):
        # u < P hits with probability exactly P for u ~ U[0,1).
        if rng.random() < cfg.P:
            triggered[i] = True
            if n_erase == 0:
                continue
            flat = maps[i].reshape(-1)
            top = np.argsort(-flat, kind="stable")[:n_erase]
            mask = np.zeros(height * width, dtype=bool)
            mask[top] = True
            mask = mask.reshape(height, width)
            masks[i] = mask
            out[i][:, torch.from_numpy(mask)] = ERASE_VALUE
    return out, masks, triggered


def random_erasing(images: torch.Tensor, rng: np.random.Generator,
                   params: RandomErasingParams | None = None) -> torch.Tensor:
    """Baseline: zero one random rectangle per triggered image.

    The rectangle's area fraction is drawn from ``area_range`` and its aspect
    ratio log-uniformly from ``aspect_range``; integer rounding may undershoot
    the lower area bound by a row or column.
    """
    params = params or RandomErasingParams()
    out = images.clone()
    n_img, _, height, width = images.shape
    lo, hi = params.area_range
    a_lo, a_hi = params.aspect_range
    for i in range(n_img):
        if rng.random() >= params.probability:
            continue
        frac = rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(math.log(a_lo), math.log(a_hi)))
        h = max(1, min(height, int(math.sqrt(frac * height * width * aspect))))
        w = max(1, min(width, int(math.sqrt(frac * height * width / aspect))))
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        out[i, :, top:top + h, left:left + w] = params.value
    return out


def resize_maps_to_images(maps: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    """Bilinear upsample of tap-resolution maps to image resolution."""
    return bilinear_resize(maps, image_size)
