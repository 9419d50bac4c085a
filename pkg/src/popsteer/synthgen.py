"""Extreme-preference synthetic users: sequences drawn only from head or only from tail items."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .data import PopularityPartition

SIDES = ("Pop", "Unpop")


class EmptyItemSet(ValueError):
    pass


@dataclass
class SyntheticProfiles:
    side: str
    sequences: np.ndarray  # (n_prime, M)
    seed: int

    @property
    def length(self) -> int:
        return self.sequences.shape[1]

    def __len__(self) -> int:
        return len(self.sequences)


def side_items(partition: PopularityPartition, side: str) -> np.ndarray:
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    items = partition.head_array if side == "Pop" else partition.tail_array
    if len(items) == 0:
        raise EmptyItemSet(f"{side} item set is empty")
    return items


def _epoch_rng(seed: int, side: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(SIDES.index(side), epoch)))


def iter_profiles(partition: PopularityPartition, side: str, n_prime: int, M: int, seed: int,
                  epoch_size: int = 2048) -> Iterator[np.ndarray]:
    """Yield (<=epoch_size, M) blocks; block e depends only on (seed, side, e)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    items = side_items(partition, side)
    for e, start in enumerate(range(0, n_prime, epoch_size)):
        rows = min(epoch_size, n_prime - start)
        yield items[_epoch_rng(seed, side, e).integers(0, len(items), size=(rows, M))]


def generate_profiles(partition: PopularityPartition, side: str, n_prime: int, M: int, seed: int,
                      epoch_size: int = 2048) -> SyntheticProfiles:
    blocks = list(iter_profiles(partition, side, n_prime, M, seed, epoch_size))
    seqs = np.concatenate(blocks) if blocks else np.zeros((0, M), dtype=np.int64)
    return SyntheticProfiles(side, seqs, seed)


def dump_profiles(path: str | Path, profiles: SyntheticProfiles) -> None:
    with open(path, "w") as fh:
        fh.write(f"# side={profiles.side} M={profiles.length} seed={profiles.seed}\n")
        for row in profiles.sequences:
            fh.write(" ".join(map(str, row.tolist())) + "\n")


def load_profiles(path: str | Path) -> SyntheticProfiles:
    with open(path) as fh:
        header = fh.readline()
        meta = dict(kv.split("=") for kv in header.lstrip("# ").split())
        rows = [list(map(int, line.split())) for line in fh if line.strip()]
    seqs = np.array(rows, dtype=np.int64).reshape(-1, int(meta["M"]))
    return SyntheticProfiles(meta["side"], seqs, int(meta["seed"]))
