"""Effect-size-weighted steering of SAE hidden activations.

A neuron with effect size ``d_j > beta`` is suppressed by ``w_j * sigma_j`` and
one with ``d_j < -beta`` is boosted by the same amount, where
``w_j = alpha_side * |d_j| / max_i |d_i|``. The steered activations go through
TopAct and the decoder to give the user embedding used for scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sae as S
from .ranking import rank_users

SUPPRESS, NONE, BOOST = 1, 0, -1


class AllZeroEffectSizes(ValueError):
    pass


@dataclass(frozen=True)
class SteeringConfig:
    alpha_pop: float = 1.0
    alpha_unpop: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha_pop < 0 or self.alpha_unpop < 0 or self.beta < 0:
            raise ValueError("alpha_pop, alpha_unpop and beta must be non-negative")


@dataclass
class SteeringPlan:
    weights: np.ndarray
    direction: np.ndarray  # SUPPRESS / NONE / BOOST per neuron
    sigma: np.ndarray = field(repr=False)

    @property
    def n_neurons(self) -> int:
        return len(self.weights)

    @property
    def steered(self) -> np.ndarray:
        return np.flatnonzero(self.direction != NONE)

    def shift(self) -> np.ndarray:
        """Additive change applied to z: -w*sigma to suppress, +w*sigma to boost."""
        return -self.direction * self.weights * self.sigma

    @classmethod
    def empty(cls, n: int, sigma=None) -> "SteeringPlan":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int8), np.zeros(n) if sigma is None else np.asarray(sigma))

    def to_csv(self, path) -> None:
        names = {SUPPRESS: "suppress", NONE: "none", BOOST: "boost"}
        with open(path, "w") as fh:
            fh.write("neuron_id,direction,w,sigma\n")
            for j in range(self.n_neurons):
                fh.write(f"{j},{names[int(self.direction[j])]},{self.weights[j]:.6g},{self.sigma[j]:.6g}\n")


def compute_plan(d: np.ndarray, sigma: np.ndarray, config: SteeringConfig) -> SteeringPlan:
    """Per-neuron weights and directions from effect sizes ``d`` and activation stds ``sigma``."""
    d = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("effect sizes must be finite")
    dmax = np.abs(d).max() if len(d) else 0.0
    if dmax == 0:
        raise AllZeroEffectSizes("max |d| is zero")
    direction = np.zeros(len(d), dtype=np.int8)
    direction[d > config.beta] = SUPPRESS
    direction[d < -config.beta] = BOOST
    rel = np.abs(d) / dmax
    w = np.where(direction == SUPPRESS, config.alpha_pop * rel, 0.0)
    w = np.where(direction == BOOST, config.alpha_unpop * rel, w)
    return SteeringPlan(w, direction, np.asarray(sigma, dtype=np.float64).copy())


def plan_from_profile(profile, config: SteeringConfig) -> SteeringPlan:
    return compute_plan(profile.d, profile.std_real, config)


def steer_hidden(z: np.ndarray, plan: SteeringPlan) -> np.ndarray:
    z = np.asarray(z)
    if z.shape[-1] != plan.n_neurons:
        raise S.DimensionMismatch(f"z has {z.shape[-1]} neurons, plan has {plan.n_neurons}")
    out = np.where(plan.direction != NONE, z + plan.shift(), z)
    return out.astype(z.dtype, copy=False)


def decode_hidden(sae: S.SaeParams, z: np.ndarray) -> np.ndarray:
    return S.decode(sae, S.top_act(z, sae.k))


def steered_embedding(sae: S.SaeParams, x: np.ndarray, plan: SteeringPlan) -> np.ndarray:
    return decode_hidden(sae, steer_hidden(S.encode(sae, x), plan))


def steered_embeddings(sae: S.SaeParams, X: np.ndarray, plan: SteeringPlan | None, batch: int = 2048) -> np.ndarray:
    """Steered reconstruction for every row of X; ``plan=None`` is the plain SAE pipeline."""
    out = np.empty_like(X)
    for s in range(0, len(X), batch):
        z = S.encode(sae, X[s:s + batch])
        if plan is not None:
            z = steer_hidden(z, plan)
        out[s:s + batch] = decode_hidden(sae, z)
    return out


def steered_rank(encoder, sae: S.SaeParams, plan: SteeringPlan, user_sequence, k: int = 10) -> np.ndarray:
    from .encoder import encode_user

    x = encode_user(encoder, user_sequence)
    p = steered_embedding(sae, x, plan)
    return rank_users(encoder.item_embeddings, p[None], [np.asarray(user_sequence)], k)[0]
