"""Identity cross-entropy and batch-hard triplet losses.

The training objective is the unweighted sum of four terms: identity and
triplet loss for each of the two branches. Triplet distances are Euclidean
and taken on the pre-bottleneck embeddings; retrieval similarity elsewhere
in the package is cosine. The two conventions are deliberate and kept apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidInputError, SamplerContractError


@dataclass
class TripletConfig:
    margin: float = 0.3

    def __post_init__(self):
        if self.margin <= 0:
            raise InvalidInputError(f"triplet margin must be > 0, got {self.margin}")


@dataclass
class LossBundle:
    """Per-step loss components; the total is their sum by construction."""

    esb_id: float
    esb_triplet: float
    aib_id: float
    aib_triplet: float

    @property
    def total(self) -> float:
        return self.esb_id + self.esb_triplet + self.aib_id + self.aib_triplet

    def as_row(self) -> dict[str, float]:
        return {
            "L_total": self.total,
            "L_ESB_id": self.esb_id,
            "L_ESB_triplet": self.esb_triplet,
            "L_AIB_id": self.aib_id,
            "L_AIB_triplet": self.aib_triplet,
        }


def id_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the batch."""
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise InvalidInputError(
            f"labels outside classifier range [0, {logits.shape[1]}): "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits, labels)


def check_batch_labels(labels: torch.Tensor) -> None:
    """Raise unless every label appears >= 2 times and >= 2 labels exist."""
    uniq, counts = torch.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise SamplerContractError("batch holds a single identity; need >= 2 distinct labels")
    if (counts < 2).any():
        bad = uniq[counts < 2].tolist()
        raise SamplerContractError(f"labels with a single instance in the batch: {bad}")


def batch_hard_triplet(
    embeddings: torch.Tensor, labels: torch.Tensor, cfg: TripletConfig | None = None
) -> torch.Tensor:
    """Batch-hard triplet loss with Euclidean distances.

    Per anchor: hinge on (margin + hardest-positive distance - hardest-
    negative distance), where the hardest positive is the farthest same-label
    sample (self excluded) and the hardest negative the closest other-label
    sample. Mean over anchors.
    """
    cfg = cfg or TripletConfig()
    check_batch_labels(labels)

    dist = torch.cdist(embeddings, embeddings, p=2)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)

    pos_mask = same & ~eye
    neg_mask = ~same
    inf = torch.tensor(float("inf"), device=dist.device, dtype=dist.dtype)
    hardest_pos = torch.where(pos_mask, dist, -inf).max(dim=1).values
    hardest_neg = torch.where(neg_mask, dist, inf).min(dim=1).values
    return F.relu(cfg.margin + hardest_pos - hardest_neg).mean()
