"""Comparison methods (Random, IPR) and ablations of the steering rule (Noise, RandomSelect)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .steer import NONE, SteeringConfig, SteeringPlan, compute_plan


class ListTooShort(ValueError):
    pass


@dataclass(frozen=True)
class AblationConfig:
    variant: str  # "noise" | "randomselect"
    xi: float = 0.0
    seed: int = 0
    steering: SteeringConfig = SteeringConfig()

    def __post_init__(self):
        if self.variant not in ("noise", "randomselect"):
            raise ValueError(f"unknown ablation variant {self.variant!r}")
        if self.xi < 0:
            raise ValueError("xi must be >= 0")


def random_baseline(long_list, k: int, seed=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """k items sampled without replacement from ``long_list``, original order kept."""
    long_list = np.asarray(long_list)
    if len(long_list) < k:
        raise ListTooShort(f"list of {len(long_list)} items, need {k}")
    rng = np.random.default_rng(seed) if rng is None else rng
    pick = np.sort(rng.choice(len(long_list), size=k, replace=False))
    return long_list[pick]


def ipr_rescale(scores: np.ndarray, popularity: np.ndarray, alpha: float, max_pop: float | None = None) -> np.ndarray:
    """s / (1 + alpha * pop/max_pop); ``max_pop`` is the catalog maximum, default ``popularity.max()``.

    Pass ``max_pop`` when ``popularity`` covers only a candidate subset.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    pop = np.asarray(popularity, dtype=np.float64)
    top = pop.max() if max_pop is None else float(max_pop)
    rho = pop / top if top > 0 else np.zeros_like(pop)
    return np.asarray(scores) / (1.0 + alpha * rho)


def noise_ablation(z: np.ndarray, selected, xi: float, seed=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Add independent N(0, xi^2) draws to the ``selected`` neuron columns of z."""
    if xi < 0:
        raise ValueError("xi must be >= 0")
    z = np.asarray(z)
    selected = np.asarray(selected, dtype=np.int64)
    out = z.copy()
    if xi == 0 or len(selected) == 0:
        return out
    rng = np.random.default_rng(seed) if rng is None else rng
    noise = rng.normal(0.0, xi, size=z.shape[:-1] + (len(selected),))
    out[..., selected] = out[..., selected] + noise.astype(z.dtype)
    return out


def random_select_ablation(d: np.ndarray, sigma: np.ndarray, config: SteeringConfig, seed=None) -> SteeringPlan:
    """Move PopSteer's weights and directions onto an equally sized random set of neurons.

    Each target neuron keeps its own sigma; the (weight, direction) pairs are
    assigned by a seeded random bijection from the PopSteer-selected neurons.
    """
    ref = compute_plan(d, sigma, config)
    src = ref.steered
    n = ref.n_neurons
    rng = np.random.default_rng(seed)
    targets = rng.choice(n, size=len(src), replace=False)
    src = src[rng.permutation(len(src))]
    w = np.zeros(n)
    direction = np.full(n, NONE, dtype=np.int8)
    w[targets] = ref.weights[src]
    direction[targets] = ref.direction[src]
    return SteeringPlan(w, direction, np.asarray(sigma, dtype=np.float64).copy())
