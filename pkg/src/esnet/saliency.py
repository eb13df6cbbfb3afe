"""Ranking saliency maps from confidence-score gradients.

Given a query/gallery pair, the confidence that both images show the same
identity is the cosine of their descriptors. The salient map of the query is
built from the gradient of that score with respect to a tapped feature map:
per location, the channel-wise sum of gradient times activation, rectified.
The gradient is taken per location (not spatially pooled), which is what
distinguishes this from the classification-style map also provided here as a
baseline. No identity labels are needed, so the method applies to images of
identities never seen in training.

All maps leave the model untouched: gradients are requested functionally and
never accumulated into parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError


@dataclass
class SalientMap:
    """Nonnegative spatial importance map, optionally resized to image size."""

    values: np.ndarray                  # (h, w) at tap resolution
    resized: np.ndarray | None = None   # (H, W) at image resolution
    score: float | None = None          # pair confidence, when applicable

    def best(self) -> np.ndarray:
        return self.resized if self.resized is not None else self.values


def cosine_score(f_q: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
    """Cosine of the angle between two descriptors, in [-1, 1]."""
    nq = torch.linalg.vector_norm(f_q)
    ng = torch.linalg.vector_norm(f_g)
    if float(nq) == 0.0 or float(ng) == 0.0:
        raise InvalidInputError("cosine score is undefined for a zero-norm descriptor")
    return (f_q * f_g).sum() / (nq * ng)


def maps_from_score(score: torch.Tensor, tapped: torch.Tensor,
                    retain_graph: bool = False) -> torch.Tensor:
    """Rectified gradient-times-activation maps for a scalar score.

    ``tapped`` is (N, C, h, w); returns detached (N, h, w) maps. The gradient
    is requested with ``torch.autograd.grad``, so no parameter .grad buffer
    is touched.
    """
    (phi,) = torch.autograd.grad(score, tapped, retain_graph=retain_graph)
    return F.relu((phi * tapped.detach()).sum(dim=1))


def gradcam_maps_from_logits(logits: torch.Tensor, tapped: torch.Tensor,
                             targets: torch.Tensor, retain_graph: bool = False) -> torch.Tensor:
    """Classification-gradient baseline maps, one per image.

    Channel weights are the spatial means of the gradients of the summed
    target logits; the map is the rectified weighted channel sum.
    """
    picked = logits[torch.arange(len(targets)), targets].sum()
    (grads,) = torch.autograd.grad(picked, tapped, retain_graph=retain_graph)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    return F.relu((weights * tapped.detach()).sum(dim=1))


def _as_batched(image: torch.Tensor) -> torch.Tensor:
    return image.unsqueeze(0) if image.ndim == 3 else image


def cg_ram(model, query_image: torch.Tensor, gallery_image: torch.Tensor,
           tap=None, resize_to: tuple[int, int] | None = None) -> SalientMap:
    """Salient map of the query for a query/gallery pair.

    The model only needs to provide ``tapped_descriptor(image, tap)``
    returning (descriptor, tapped feature map) with an intact autograd graph
    on the query side. Model parameters are left bit-identical.
    """
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            d_gallery, _ = model.tapped_descriptor(_as_batched(gallery_image), tap)
        with torch.enable_grad():
            d_query, tapped = model.tapped_descriptor(_as_batched(query_image), tap)
            score = cosine_score(d_query, d_gallery)
            values = maps_from_score(score, tapped)[0]
    finally:
        if hasattr(model, "train"):
            model.train(was_training)

    out = SalientMap(values=values.cpu().numpy(), score=float(score))
    if resize_to is not None:
        out.resized = bilinear_resize(values.unsqueeze(0), resize_to)[0].cpu().numpy()
    return out


def grad_cam(model, image: torch.Tensor, target_identity: int,
             tap=None, branch: str = "esb",
             resize_to: tuple[int, int] | None = None) -> SalientMap:
    """Classification-gradient salient map for one image and one identity."""
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.enable_grad():
            logits, tapped = model.tapped_logits(_as_batched(image), tap, branch)
            if not 0 <= target_identity < logits.shape[1]:
                raise InvalidInputError(
                    f"identity {target_identity} outside classifier range [0, {logits.shape[1]})"
                )
            targets = torch.tensor([target_identity])
            values = gradcam_maps_from_logits(logits, tapped, targets)[0]
    finally:
        if hasattr(model, "train"):
            model.train(was_training)

    out = SalientMap(values=values.cpu().numpy())
    if resize_to is not None:
        out.resized = bilinear_resize(values.unsqueeze(0), resize_to)[0].cpu().numpy()
    return out


def bilinear_resize(maps: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a stack of (N, h, w) maps to (N, H, W)."""
    h, w = int(target[0]), int(target[1])
    if h <= 0 or w <= 0:
        raise InvalidInputError(f"resize target must be positive, got {(h, w)}")
    if maps.ndim != 3:
        raise InvalidInputError(f"expected (N, h, w) maps, got {tuple(maps.shape)}")
    if tuple(maps.shape[1:]) == (h, w):
        return maps.clone()
    out = F.interpolate(maps.unsqueeze(1), size=(h, w), mode="bilinear", align_corners=False)
    return out.squeeze(1).clamp(min=0)


def resize_map(m: SalientMap, target: tuple[int, int]) -> SalientMap:
    """New map holding the bilinear resize of ``m.values`` in ``resized``."""
    if m.values.size == 0:
        raise InvalidInputError("cannot resize an empty map")
    values = torch.from_numpy(np.ascontiguousarray(m.values, dtype=np.float32))
    resized = bilinear_resize(values.unsqueeze(0), target)[0].numpy()
    return SalientMap(values=m.values.copy(), resized=resized, score=m.score)


def _jet(t: np.ndarray) -> np.ndarray:
    """Compact jet-style colormap, t in [0, 1] -> RGB in [0, 1]."""
    r = np.clip(1.5 - np.abs(4.0 * t - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * t - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * t - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def overlay(image_rgb: np.ndarray, m: SalientMap | np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend a max-normalized heat rendering onto an RGB image.

    ``image_rgb`` is (H, W, 3) uint8 or float in [0, 1]; the map must already
    be at image resolution. Returns uint8 (H, W, 3). An all-zero map renders
    as zero heat, i.e. the blend with the colormap's cold end.
    """
    heat_src = m.best() if isinstance(m, SalientMap) else np.asarray(m)
    img = np.asarray(image_rgb, dtype=np.float64)
    if img.dtype != np.float64:
        img = img.astype(np.float64)
    if img.max() > 1.0:
        img = img / 255.0
    if img.shape[:2] != heat_src.shape:
        raise InvalidInputError(
            f"map shape {heat_src.shape} does not match image shape {img.shape[:2]}"
        )
    peak = heat_src.max()
    norm = heat_src / peak if peak > 0 else np.zeros_like(heat_src, dtype=np.float64)
    blended = (1.0 - alpha) * img + alpha * _jet(norm)
    return np.clip(blended * 255.0 + 0.5, 0, 255).astype(np.uint8)


def write_map_txt(values: np.ndarray, path) -> None:
    """Portable text dump: one shape header line, then rows of values."""
    values = np.asarray(values)
    header = f"# shape {values.shape[0]} {values.shape[1]}"
    np.savetxt(path, values, fmt="%.9e", header=header, comments="")


def read_map_txt(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().split()
        h, w = int(header[2]), int(header[3])
        values = np.loadtxt(fh)
    return values.reshape(h, w)
