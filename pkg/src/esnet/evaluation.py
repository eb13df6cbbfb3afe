"""Retrieval evaluation: CMC rank-k and mAP under the cross-camera protocol.

For every query the gallery is ranked by descending cosine similarity (ties
broken by gallery index), entries sharing both the query's identity and its
camera are removed, and average precision is read off the ranked list.
Queries left with no valid positive are dropped from the mean and counted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError


@dataclass
class EvalResult:
    cmc: np.ndarray            # rank-k accuracy, k = 1..rank_max
    mAP: float
    per_query_ap: np.ndarray
    dropped_queries: int = 0
    kept_queries: int = 0

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def to_json(self) -> str:
        return json.dumps(
            {
                "cmc": [float(x) for x in self.cmc],
                "mAP": self.mAP,
                "rank1": self.rank(1),
                "dropped_queries": self.dropped_queries,
                "kept_queries": self.kept_queries,
            },
            indent=2,
        )


def extract_features(model, samples, load_image) -> np.ndarray:
    """Retrieval descriptor for every sample, stacked to (N, D_total).

    ``load_image`` maps a sample to its test-augmented image tensor; the
    descriptor itself (flip-averaged, per-branch normalized, concatenated)
    comes from the model.
    """
    descs = []
    with torch.no_grad():
        for s in samples:
            descs.append(model.infer_descriptor(load_image(s)).cpu().numpy())
    return np.stack(descs)


def cmc_map(q_desc, q_pids, q_cams, g_desc, g_pids, g_cams, rank_max: int | None = None) -> EvalResult:
    q_desc = np.asarray(q_desc, dtype=np.float64)
    g_desc = np.asarray(g_desc, dtype=np.float64)
    q_pids = np.asarray(q_pids)
    q_cams = np.asarray(q_cams)
    g_pids = np.asarray(g_pids)
    g_cams = np.asarray(g_cams)
    if g_desc.size == 0 or len(g_pids) == 0:
        raise InvalidInputError("gallery is empty")
    if rank_max is None:
        rank_max = len(g_pids)
    rank_max = min(rank_max, len(g_pids))

    qn = q_desc / np.linalg.norm(q_desc, axis=1, keepdims=True)
    gn = g_desc / np.linalg.norm(g_desc, axis=1, keepdims=True)
    sims = qn @ gn.T  # (Q, G)

    aps = []
    first_hits = []
    dropped = 0
    for qi in range(len(q_pids)):
        # Stable sort on the negated similarities rank ties by gallery index.
        order = np.argsort(-sims[qi], kind="stable")
        junk = (g_pids[order] == q_pids[qi]) & (g_cams[order] == q_cams[qi])
        kept = order[~junk]
        matches = g_pids[kept] == q_pids[qi]
        n_pos = int(matches.sum())
        if n_pos == 0:
            dropped += 1
            continue
        hit_ranks = np.flatnonzero(matches) + 1  # 1-based positions in the kept list
        ap = 0.0
        for i, rank in enumerate(hit_ranks, start=1):
            ap += i / rank
        aps.append(ap / n_pos)
        first_hits.append(int(hit_ranks[0]))

    if not aps:
        raise InvalidInputError("no query kept a valid positive after the camera exclusion")

    first_hits_arr = np.asarray(first_hits)
    cmc = np.array([(first_hits_arr <= k).mean() for k in range(1, rank_max + 1)])
    per_query = np.asarray(aps)
    # Sequential sum, matching the order queries were processed in.
    mean_ap = 0.0
    for ap in aps:
        mean_ap += ap
    mean_ap /= len(aps)
    return EvalResult(
        cmc=cmc,
        mAP=float(mean_ap),
        per_query_ap=per_query,
        dropped_queries=dropped,
        kept_queries=len(aps),
    )


def write_result(result: EvalResult, out_dir, prefix: str = "eval") -> None:
    """JSON summary plus a CSV of per-query average precision."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{prefix}.json").write_text(result.to_json())
    lines = ["query_index,ap"]
    lines += [f"{i},{ap!r}" for i, ap in enumerate(result.per_query_ap)]
    (out / f"{prefix}_per_query_ap.csv").write_text("\n".join(lines) + "\n")
