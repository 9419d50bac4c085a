"""Deterministic row-wise top-k: larger value first, ties by lower column index."""

from __future__ import annotations

import numpy as np


def topk_indices(values: np.ndarray, k: int, slack: int = 8) -> np.ndarray:
    """Column indices of the ``k`` largest entries per row, best first.

    Equal values are ordered by ascending column index, including at the
    cut-off, so the result is a total-order prefix. ``-inf`` entries are never
    returned ahead of finite ones; rows are padded with -1 only if ``k`` exceeds
    the number of columns.
    """
    values = np.asarray(values)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[None]
    n, m = values.shape
    k = int(k)
    if k <= 0:
        out = np.zeros((n, 0), dtype=np.int64)
        return out[0] if squeeze else out
    kk = min(k, m)
    c = min(m, kk + slack)
    if c == m:
        cand = np.broadcast_to(np.arange(m), (n, m))
    else:
        cand = np.argpartition(-values, c - 1, axis=1)[:, :c]
    cv = np.take_along_axis(values, cand, axis=1)
    # sort candidates by (-value, index)
    order = np.lexsort((cand, -cv), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    cv = np.take_along_axis(cv, order, axis=1)
    out = cand[:, :kk].astype(np.int64)
    if c < m:
        # rows where the k-th value ties the candidate floor may have lost lower-index ties
        unsafe = np.flatnonzero(cv[:, kk - 1] <= cv[:, -1])
        for r in unsafe:
            row = values[r]
            out[r] = np.lexsort((np.arange(m), -row))[:kk]
    if kk < k:
        out = np.concatenate([out, np.full((n, k - kk), -1, dtype=np.int64)], axis=1)
    return out[0] if squeeze else out


def mask_history(scores: np.ndarray, histories) -> np.ndarray:
    """Set each row's already-seen items to -inf (in place)."""
    for r, h in enumerate(histories):
        if len(h):
            scores[r, np.asarray(h)] = -np.inf
    return scores


def rank_scores(scores: np.ndarray, histories, k: int) -> list[np.ndarray]:
    """Top-k per row after excluding history; lists shrink when fewer candidates remain."""
    scores = mask_history(np.array(scores, dtype=np.float64, copy=True), histories)
    top = topk_indices(scores, k)
    out = []
    for r in range(len(top)):
        row = top[r]
        row = row[row >= 0]
        out.append(row[np.isfinite(scores[r, row])])
    return out


def rank_users(item_table: np.ndarray, x: np.ndarray, histories, k: int, batch: int = 2048) -> list[np.ndarray]:
    """Top-k items per user for embeddings ``x`` against ``item_table``."""
    out: list[np.ndarray] = []
    for s in range(0, len(x), batch):
        scores = x[s:s + batch] @ item_table.T
        out.extend(rank_scores(scores, histories[s:s + batch], k))
    return out
