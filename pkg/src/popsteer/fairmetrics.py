"""nDCG@k (overall / head / tail), Item Coverage and Gini over recommendation lists."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


class ZeroExposure(ValueError):
    pass


@dataclass
class MetricsReport:
    ndcg: float
    ndcg_head: float | None
    ndcg_tail: float | None
    item_coverage: float
    gini: float

    def as_dict(self) -> dict:
        return asdict(self)


def ndcg_at_k(ranked, target, k: int = 10) -> float:
    """Single relevant item: 1/log2(rank+1) if it sits in the first k, else 0."""
    for r, item in enumerate(list(ranked)[:k], start=1):
        if item == target:
            return 1.0 / math.log2(r + 1)
    return 0.0


def per_user_ndcg(lists, targets, k: int = 10) -> np.ndarray:
    out = np.zeros(len(lists))
    for u, (lst, t) in enumerate(zip(lists, targets)):
        hit = np.flatnonzero(np.asarray(lst[:k]) == t)
        if len(hit):
            out[u] = 1.0 / np.log2(hit[0] + 2)
    return out


def batch_ndcg(lists, targets, k: int = 10) -> float:
    if len(lists) == 0:
        return 0.0
    return float(per_user_ndcg(lists, targets, k).mean())


def head_tail_ndcg(lists, targets, partition, k: int = 10) -> tuple[float | None, float | None]:
    """Mean nDCG over users whose target is a head (resp. tail) item; None when no such user."""
    scores = per_user_ndcg(lists, targets, k)
    targets = np.asarray(targets)
    head = np.isin(targets, partition.head_array)
    tail = np.isin(targets, partition.tail_array)
    return (
        float(scores[head].mean()) if head.any() else None,
        float(scores[tail].mean()) if tail.any() else None,
    )


def exposure_counts(lists, n_items: int) -> np.ndarray:
    if len(lists) == 0:
        return np.zeros(n_items, dtype=np.int64)
    flat = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists])
    return np.bincount(flat, minlength=n_items)


def item_coverage(lists, n_items: int, min_count: int = 5) -> float:
    """Fraction of the catalog recommended at least ``min_count`` times."""
    if len(lists) == 0:
        raise ValueError("empty batch")
    return float((exposure_counts(lists, n_items) >= min_count).sum() / n_items)


def gini(counts) -> float:
    x = np.sort(np.asarray(counts, dtype=np.float64))
    m = len(x)
    total = x.sum()
    if m == 0 or total <= 0:
        raise ZeroExposure("total exposure is zero")
    i = np.arange(1, m + 1)
    return float(((2 * i - m - 1) * x).sum() / (m * total))


def evaluate_lists(lists, targets, n_items: int, partition=None, k: int = 10, min_count: int = 5) -> MetricsReport:
    head, tail = head_tail_ndcg(lists, targets, partition, k) if partition is not None else (None, None)
    return MetricsReport(
        ndcg=batch_ndcg(lists, targets, k),
        ndcg_head=head,
        ndcg_tail=tail,
        item_coverage=item_coverage(lists, n_items, min_count),
        gini=gini(exposure_counts(lists, n_items)),
    )
