"""Synthetic popularity-skewed sequential interaction logs for desk-scale runs.

Items carry a genre and a Zipf popularity weight. Each user has a favourite
pair of genres and a popularity appetite ``pi_u``. At each step the user picks
a catalog-wide item by popularity weight with probability ``pi_u``; otherwise a
uniformly random item of the current genre, which persists between steps.
Users never repeat an item.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InteractionLog


@dataclass
class SurrogateConfig:
    n_users: int = 1000
    n_items: int = 400
    n_genres: int = 8
    mean_len: int = 60
    min_len: int = 8
    zipf: float = 1.0
    appetite_a: float = 2.0
    appetite_b: float = 2.0
    genre_stay: float = 0.7
    seed: int = 0


def generate_log(cfg: SurrogateConfig = SurrogateConfig()) -> InteractionLog:
    rng = np.random.default_rng(cfg.seed)
    genre = rng.integers(0, cfg.n_genres, size=cfg.n_items)
    rank = rng.permutation(cfg.n_items) + 1
    weight = rank ** -cfg.zipf
    members = [np.flatnonzero(genre == g) for g in range(cfg.n_genres)]
    records = []
    for u in range(cfg.n_users):
        taste = rng.choice(cfg.n_genres, size=2, replace=False)
        appetite = rng.beta(cfg.appetite_a, cfg.appetite_b)
        length = min(cfg.n_items // 2, cfg.min_len + rng.poisson(cfg.mean_len - cfg.min_len))
        seen = np.zeros(cfg.n_items, dtype=bool)
        g = rng.choice(taste)
        t = int(rng.integers(0, 10_000))
        for _ in range(length):
            if rng.random() > cfg.genre_stay:
                g = rng.choice(taste) if rng.random() < 0.8 else rng.integers(0, cfg.n_genres)
            if rng.random() < appetite:
                cand = np.flatnonzero(~seen)
                p = weight[cand]
                i = cand[rng.choice(len(cand), p=p / p.sum())]
            else:
                cand = members[g][~seen[members[g]]]
                if len(cand) == 0:
                    cand = np.flatnonzero(~seen)
                i = cand[rng.integers(len(cand))]
            seen[i] = True
            t += int(rng.integers(1, 100))
            records.append((f"u{u}", f"i{i}", t))
    order = rng.permutation(len(records))
    return InteractionLog.from_records(records[j] for j in order)


def write_tsv(path, lg: InteractionLog) -> None:
    with open(path, "w") as fh:
        for u, i, t in zip(lg.users, lg.items, lg.timestamps):
            fh.write(f"{lg.user_ids[u]}\t{lg.item_ids[i]}\t{t}\n")
