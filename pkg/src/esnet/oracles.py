"""Brute-force reference implementations used to cross-check the fast paths.

Everything here trades speed for obviousness: plain Python loops, sequential
sums, no shared code with the modules under test. The test suite (and the
`gradcheck` CLI command) compare production code against these.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OracleReport:
    """One comparison of an implementation value against a reference value."""

    case_id: str
    reference: float
    implementation: float
    abs_error: float
    rel_error: float

    @property
    def ok(self) -> bool:
        return math.isfinite(self.abs_error) and math.isfinite(self.rel_error)


def compare(case_id: str, reference: float, implementation: float) -> OracleReport:
    abs_err = abs(reference - implementation)
    denom = max(abs(reference), abs(implementation))
    rel_err = abs_err / denom if denom > 0 else 0.0
    return OracleReport(case_id, reference, implementation, abs_err, rel_err)


def oracle_fd(fn, point, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    ``point`` may be a scalar or an ndarray; every element is perturbed by
    +-``step`` independently. Returns an array of the same shape (0-d for a
    scalar point).
    """
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        f_plus = float(fn(point.reshape(point.shape)))
        flat[i] = saved - step
        f_minus = float(fn(point.reshape(point.shape)))
        flat[i] = saved
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def fd_rel_error(analytic, estimate) -> float:
    """Norm-relative disagreement between an analytic gradient and an estimate.

    ||a - e|| / max(||a||, ||e||); 0 when both vanish. The norm-relative form
    is the standard gradient-check metric: it is insensitive to individual
    components whose true magnitude sits below the finite-difference noise
    floor.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    e = np.asarray(estimate, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(e))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - e) / denom)


def oracle_triplet(embeddings, labels, margin: float) -> float:
    """Exhaustive batch-hard triplet loss.

    For every anchor, scans all positives (same label, not the anchor) for
    the largest Euclidean distance and all negatives for the smallest, then
    averages the hinge over anchors.
    """
    emb = [list(map(float, row)) for row in np.asarray(embeddings)]
    lab = [int(x) for x in np.asarray(labels)]
    n = len(emb)

    def dist(i: int, j: int) -> float:
        return math.sqrt(sum((emb[i][d] - emb[j][d]) ** 2 for d in range(len(emb[i]))))

    total = 0.0
    for a in range(n):
        hardest_pos = None
        hardest_neg = None
        for j in range(n):
            if j == a:
                continue
            d = dist(a, j)
            if lab[j] == lab[a]:
                if hardest_pos is None or d > hardest_pos:
                    hardest_pos = d
            else:
                if hardest_neg is None or d < hardest_neg:
                    hardest_neg = d
        if hardest_pos is None or hardest_neg is None:
            raise ValueError("oracle_triplet needs >=2 instances per label and >=2 labels")
        total += max(0.0, margin + hardest_pos - hardest_neg)
    return total / n


def oracle_ap(ranking, positives) -> float:
    """Average precision from an already-ranked gallery list.

    ``ranking`` is the sequence of gallery ids in retrieval order,
    ``positives`` the set of relevant ids. Walks the list once, adding
    precision at every hit. Raises if there are no relevant items.
    """
    pos = set(positives)
    if not pos:
        raise ValueError("average precision is undefined with no positives")
    hits = 0
    total = 0.0
    for rank, item in enumerate(ranking, start=1):
        if item in pos:
            hits += 1
            total += hits / rank
    if hits == 0:
        return 0.0
    return total / len(pos)


def oracle_cmc_map(q_desc, q_pids, q_cams, g_desc, g_pids, g_cams, rank_max: int):
    """Full retrieval evaluation by plain loops, including the
    same-identity-same-camera exclusion.

    Returns (cmc list of length rank_max, mAP, per-query AP list, dropped
    count). Gallery is ordered by descending cosine similarity with ties
    broken by gallery index.
    """
    q_desc = np.asarray(q_desc, dtype=np.float64)
    g_desc = np.asarray(g_desc, dtype=np.float64)
    n_g = len(g_pids)

    aps = []
    first_hit_ranks = []
    dropped = 0
    for qi in range(len(q_pids)):
        qv = q_desc[qi]
        qn = math.sqrt(sum(x * x for x in qv))
        scored = []
        for gi in range(n_g):
            gv = g_desc[gi]
            gn = math.sqrt(sum(x * x for x in gv))
            sim = sum(a * b for a, b in zip(qv, gv)) / (qn * gn)
            scored.append((sim, gi))
        scored.sort(key=lambda t: (-t[0], t[1]))

        kept = [gi for _, gi in scored
                if not (g_pids[gi] == q_pids[qi] and g_cams[gi] == q_cams[qi])]
        n_pos = sum(1 for gi in kept if g_pids[gi] == q_pids[qi])
        if n_pos == 0:
            dropped += 1
            continue

        hits = 0
        ap = 0.0
        first = None
        for rank, gi in enumerate(kept, start=1):
            if g_pids[gi] == q_pids[qi]:
                hits += 1
                ap += hits / rank
                if first is None:
                    first = rank
        aps.append(ap / n_pos)
        first_hit_ranks.append(first)

    if not aps:
        raise ValueError("every query was dropped by the exclusion rule")
    cmc = []
    for k in range(1, rank_max + 1):
        cmc.append(sum(1 for r in first_hit_ranks if r <= k) / len(first_hit_ranks))
    mean_ap = sum(aps) / len(aps)
    return cmc, mean_ap, aps, dropped


def oracle_top_positions(values, n: int) -> list[tuple[int, int]]:
    """The ``n`` largest positions of a 2-D map, ties broken row-major.

    Returns (row, col) pairs. Reference for the top-R pixel selection used
    by the erasing step.
    """
    vals = np.asarray(values, dtype=np.float64)
    h, w = vals.shape
    entries = []
    for i in range(h):
        for j in range(w):
            entries.append((-float(vals[i, j]), i * w + j, (i, j)))
    entries.sort()
    return [pos for _, _, pos in entries[:n]]
