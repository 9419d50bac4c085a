"""Interaction logs: loading, k-core filtering, leave-one-out split, head/tail partition."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PREPARED_VERSION = 1


class MalformedRecord(ValueError):
    def __init__(self, line: int, reason: str = ""):
        super().__init__(f"malformed record on line {line}" + (f": {reason}" if reason else ""))
        self.line = line


class EmptyFile(ValueError):
    pass


class EmptyResult(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    """Delimiter and 0-based column positions of user, item and timestamp."""

    sep: str = "\t"
    user_col: int = 0
    item_col: int = 1
    time_col: int = 2
    header: bool = False

    @classmethod
    def parse(cls, text: str) -> "ColumnSpec":
        """Parse ``"sep=::,user=0,item=1,time=3,header=0"`` style specs.

        Named presets: ``tsv``, ``csv``, ``ml1m``.
        """
        presets = {
            "tsv": cls(),
            "csv": cls(sep=","),
            "ml1m": cls(sep="::", user_col=0, item_col=1, time_col=3),
        }
        if text in presets:
            return presets[text]
        kw: dict = {}
        for part in text.split(";") if ";" in text else text.split(","):
            if not part:
                continue
            key, _, value = part.partition("=")
            key = key.strip()
            if key == "sep":
                kw["sep"] = {"tab": "\t", "comma": ",", "\\t": "\t"}.get(value, value)
            elif key in ("user", "item", "time"):
                kw[f"{key}_col"] = int(value)
            elif key == "header":
                kw["header"] = value.strip().lower() in ("1", "true", "yes")
            else:
                raise ValueError(f"unknown column spec key {key!r}")
        return cls(**kw)


@dataclass(frozen=True)
class InteractionLog:
    """Timestamped (user, item) events with dense 0..n-1 / 0..m-1 indices.

    ``user_ids[u]`` / ``item_ids[i]`` hold the raw identifiers. Interaction order
    is the original file order.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    @property
    def item_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.item_ids)}

    @property
    def density(self) -> float:
        return len(self) / (self.n_users * self.n_items) if len(self) else 0.0

    @classmethod
    def from_records(cls, records) -> "InteractionLog":
        """Build from an iterable of (user, item, timestamp); indices in first-seen order."""
        uidx: dict[str, int] = {}
        iidx: dict[str, int] = {}
        us, its, ts = [], [], []
        for u, i, t in records:
            us.append(uidx.setdefault(str(u), len(uidx)))
            its.append(iidx.setdefault(str(i), len(iidx)))
            ts.append(int(t))
        return cls(
            np.asarray(us, dtype=np.int64),
            np.asarray(its, dtype=np.int64),
            np.asarray(ts, dtype=np.int64),
            tuple(uidx),
            tuple(iidx),
        )

    def equals(self, other: "InteractionLog") -> bool:
        return (
            self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.timestamps, other.timestamps)
        )


def load_interactions(path: str | Path, fmt: ColumnSpec | str = ColumnSpec()) -> InteractionLog:
    if isinstance(fmt, str):
        fmt = ColumnSpec.parse(fmt)
    path = Path(path)
    records = []
    need = max(fmt.user_col, fmt.item_col, fmt.time_col) + 1
    with path.open("r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno == 1 and fmt.header:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(fmt.sep)
            if len(parts) < need:
                raise MalformedRecord(lineno, f"expected at least {need} columns")
            user = parts[fmt.user_col].strip()
            item = parts[fmt.item_col].strip()
            if not user or not item:
                raise MalformedRecord(lineno, "empty identifier")
            try:
                ts = int(float(parts[fmt.time_col]))
            except ValueError:
                raise MalformedRecord(lineno, f"non-numeric timestamp {parts[fmt.time_col]!r}") from None
            if ts < 0:
                raise MalformedRecord(lineno, "negative timestamp")
            records.append((user, item, ts))
    if not records:
        raise EmptyFile(str(path))
    return InteractionLog.from_records(records)


def _reindex(lg: InteractionLog, keep: np.ndarray) -> InteractionLog:
    users, items = lg.users[keep], lg.items[keep]
    # first-seen order over the surviving interactions
    _, ufirst = np.unique(users, return_index=True)
    uorder = users[np.sort(ufirst)]
    _, ifirst = np.unique(items, return_index=True)
    iorder = items[np.sort(ifirst)]
    umap = np.full(lg.n_users, -1, dtype=np.int64)
    umap[uorder] = np.arange(len(uorder))
    imap = np.full(lg.n_items, -1, dtype=np.int64)
    imap[iorder] = np.arange(len(iorder))
    return InteractionLog(
        umap[users],
        imap[items],
        lg.timestamps[keep],
        tuple(lg.user_ids[u] for u in uorder),
        tuple(lg.item_ids[i] for i in iorder),
    )


def k_core_filter(lg: InteractionLog, user_min: int = 5, item_min: int = 5) -> InteractionLog:
    """Drop users/items below the thresholds until nothing changes."""
    if user_min < 1 or item_min < 1:
        raise ValueError("core thresholds must be >= 1")
    keep = np.ones(len(lg), dtype=bool)
    while True:
        ucount = np.bincount(lg.users[keep], minlength=lg.n_users)
        icount = np.bincount(lg.items[keep], minlength=lg.n_items)
        bad = keep & ((ucount[lg.users] < user_min) | (icount[lg.items] < item_min))
        if not bad.any():
            break
        keep &= ~bad
    if not keep.any():
        raise EmptyResult(f"({user_min},{item_min})-core is empty")
    if keep.all():
        return lg
    return _reindex(lg, keep)


def subsample_users(lg: InteractionLog, fraction: float, seed: int) -> InteractionLog:
    """Keep a seeded random ``fraction`` of users with all their interactions."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return lg
    n_keep = max(1, int(round(fraction * lg.n_users)))
    keep = np.zeros(lg.n_users, dtype=bool)
    keep[np.random.default_rng(seed).permutation(lg.n_users)[:n_keep]] = True
    return _reindex(lg, keep[lg.users])


@dataclass(frozen=True)
class SplitDataset:
    """Leave-one-out split. Row r of every field belongs to user ``users[r]`` of the source log."""

    train: tuple[np.ndarray, ...]
    valid: np.ndarray
    test: np.ndarray
    users: np.ndarray
    n_items: int
    user_ids: tuple[str, ...] = ()
    item_ids: tuple[str, ...] = ()
    n_dropped: int = 0

    @property
    def n_users(self) -> int:
        return len(self.train)

    def train_counts(self) -> np.ndarray:
        if not self.train:
            return np.zeros(self.n_items, dtype=np.int64)
        return np.bincount(np.concatenate(self.train), minlength=self.n_items)

    def history(self, stage: str) -> list[np.ndarray]:
        """Input sequences for ``stage``: train prefix for "valid", train+valid for "test"."""
        if stage == "valid":
            return list(self.train)
        if stage == "test":
            return [np.append(t, v) for t, v in zip(self.train, self.valid)]
        raise ValueError(stage)

    def targets(self, stage: str) -> np.ndarray:
        return {"valid": self.valid, "test": self.test}[stage]

    def subset(self, rows) -> "SplitDataset":
        rows = np.asarray(rows)
        return SplitDataset(
            tuple(self.train[r] for r in rows),
            self.valid[rows],
            self.test[rows],
            self.users[rows],
            self.n_items,
            self.user_ids,
            self.item_ids,
            self.n_dropped,
        )


def leave_one_out_split(lg: InteractionLog) -> SplitDataset:
    # stable sort keeps file order among equal timestamps
    order = np.lexsort((np.arange(len(lg)), lg.timestamps, lg.users))
    users = lg.users[order]
    items = lg.items[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(users)]])
    train, valid, test, kept = [], [], [], []
    dropped = 0
    for s, e in zip(starts, ends):
        if e - s < 3:
            dropped += 1
            continue
        seq = items[s:e]
        train.append(seq[:-2].copy())
        valid.append(seq[-2])
        test.append(seq[-1])
        kept.append(users[s])
    if dropped:
        log.warning("leave_one_out_split: dropped %d users with fewer than 3 interactions", dropped)
    return SplitDataset(
        tuple(train),
        np.asarray(valid, dtype=np.int64),
        np.asarray(test, dtype=np.int64),
        np.asarray(kept, dtype=np.int64),
        lg.n_items,
        lg.user_ids,
        lg.item_ids,
        dropped,
    )


@dataclass(frozen=True)
class PopularityPartition:
    head: frozenset
    tail: frozenset
    counts: np.ndarray
    order: np.ndarray = field(repr=False, default=None)

    @property
    def head_array(self) -> np.ndarray:
        return np.array(sorted(self.head), dtype=np.int64)

    @property
    def tail_array(self) -> np.ndarray:
        return np.array(sorted(self.tail), dtype=np.int64)

    def head_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.counts), dtype=bool)
        mask[list(self.head)] = True
        return mask

    def tail_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.counts), dtype=bool)
        mask[list(self.tail)] = True
        return mask


def popularity_partition(
    data: SplitDataset | np.ndarray, head_frac: float = 0.1, tail_frac: float = 0.1
) -> PopularityPartition:
    """Top/bottom fractions of items by training count.

    Items are totally ordered by (count desc, index asc); head is a prefix and
    tail a suffix of that order. Accepts a split or a raw count vector.
    """
    if not (head_frac > 0 and tail_frac > 0 and head_frac + tail_frac <= 1):
        raise ValueError("need 0 < head_frac, tail_frac and head_frac + tail_frac <= 1")
    counts = data.train_counts() if isinstance(data, SplitDataset) else np.asarray(data, dtype=np.int64)
    m = len(counts)
    order = np.lexsort((np.arange(m), -counts))
    n_head = min(m, math.ceil(head_frac * m))
    n_tail = min(m - n_head, math.ceil(tail_frac * m))
    head = order[:n_head]
    tail = order[m - n_tail:] if n_tail else order[:0]
    return PopularityPartition(frozenset(head.tolist()), frozenset(tail.tolist()), counts, order)


def dataset_stats(lg: InteractionLog) -> dict:
    return {
        "users": lg.n_users,
        "items": lg.n_items,
        "interactions": len(lg),
        "density": lg.density,
    }


def save_prepared(path: str | Path, split: SplitDataset, part: PopularityPartition, meta: dict | None = None) -> None:
    import json

    lengths = np.array([len(t) for t in split.train], dtype=np.int64)
    flat = np.concatenate(split.train) if split.train else np.zeros(0, dtype=np.int64)
    from .io import _write_npz

    _write_npz(
        path,
        dict(
        version=np.int64(PREPARED_VERSION),
        train_flat=flat,
        train_len=lengths,
        valid=split.valid,
        test=split.test,
        users=split.users,
        n_items=np.int64(split.n_items),
        n_dropped=np.int64(split.n_dropped),
        user_ids=np.array(split.user_ids, dtype=str),
        item_ids=np.array(split.item_ids, dtype=str),
        counts=part.counts,
        head=part.head_array,
        tail=part.tail_array,
        meta=np.array(json.dumps(meta or {}, sort_keys=True)),
        ),
    )


def load_prepared(path: str | Path) -> tuple[SplitDataset, PopularityPartition, dict]:
    import json

    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != PREPARED_VERSION:
            raise ValueError(f"unsupported prepared dataset version {int(z['version'])}")
        bounds = np.cumsum(z["train_len"])[:-1]
        train = tuple(np.split(z["train_flat"], bounds)) if len(z["train_len"]) else ()
        split = SplitDataset(
            train,
            z["valid"],
            z["test"],
            z["users"],
            int(z["n_items"]),
            tuple(z["user_ids"].tolist()),
            tuple(z["item_ids"].tolist()),
            int(z["n_dropped"]),
        )
        counts = z["counts"]
        m = len(counts)
        part = PopularityPartition(
            frozenset(z["head"].tolist()),
            frozenset(z["tail"].tolist()),
            counts,
            np.lexsort((np.arange(m), -counts)),
        )
        meta = json.loads(str(z["meta"]))
    return split, part, meta
