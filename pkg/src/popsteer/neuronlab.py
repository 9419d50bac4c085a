"""Per-neuron activation statistics and the diagnostics built on them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import sae as S
from .encoder import encode_batch
from .fairmetrics import exposure_counts, gini


class EmptyPopulation(ValueError):
    pass


class InsufficientSamples(ValueError):
    pass


class EmptyHistory(ValueError):
    pass


class NoQualifyingNeurons(ValueError):
    pass


class RunningStats:
    """Column-wise count/mean/M2 accumulated block by block (Chan et al. merge)."""

    def __init__(self, n: int):
        self.count = 0
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)

    def update(self, block: np.ndarray) -> "RunningStats":
        block = np.asarray(block, dtype=np.float64)
        if block.ndim == 1:
            block = block[None]
        nb = len(block)
        if nb == 0:
            return self
        bmean = block.mean(axis=0)
        bm2 = ((block - bmean) ** 2).sum(axis=0)
        return self._merge(nb, bmean, bm2)

    def merge(self, other: "RunningStats") -> "RunningStats":
        return self._merge(other.count, other.mean, other.m2)

    def _merge(self, nb, bmean, bm2) -> "RunningStats":
        if nb == 0:
            return self
        n = self.count + nb
        delta = bmean - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + bm2 + delta * delta * (self.count * nb / n)
        self.count = n
        return self

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count else np.full_like(self.m2, np.nan)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.var, 0.0))


def hidden_activations(sae: S.SaeParams, encoder, sequences, batch: int = 1024) -> np.ndarray:
    return S.encode(sae, encode_batch(encoder, sequences, batch=batch))


def activation_stats(sae: S.SaeParams, encoder, population, batch: int = 1024) -> RunningStats:
    """Mean/std of hidden activations z over a population.

    ``population`` is a list of item sequences or an iterable of (b, M) blocks.
    """
    st = RunningStats(sae.n_hidden)
    if isinstance(population, (list, tuple)):
        blocks = (population[s:s + batch] for s in range(0, len(population), batch))
    elif isinstance(population, np.ndarray):
        blocks = (population[s:s + batch] for s in range(0, len(population), batch))
    else:
        blocks = population
    for blk in blocks:
        if len(blk):
            st.update(hidden_activations(sae, encoder, list(blk), batch))
    if st.count == 0:
        raise EmptyPopulation("no sequences in population")
    return st


def cohens_d(stats_pop: RunningStats, stats_unpop: RunningStats) -> tuple[np.ndarray, np.ndarray]:
    """Effect size per neuron and a mask of zero-pooled-variance neurons (given d = 0)."""
    return cohens_d_from_moments(stats_pop.mean, stats_pop.std, stats_unpop.mean, stats_unpop.std)


def cohens_d_from_moments(mu_pop, sd_pop, mu_unpop, sd_unpop) -> tuple[np.ndarray, np.ndarray]:
    mu_pop, sd_pop = np.asarray(mu_pop, float), np.asarray(sd_pop, float)
    mu_unpop, sd_unpop = np.asarray(mu_unpop, float), np.asarray(sd_unpop, float)
    pooled = np.sqrt((sd_pop ** 2 + sd_unpop ** 2) / 2.0)
    degenerate = pooled == 0
    d = np.where(degenerate, 0.0, (mu_pop - mu_unpop) / np.where(degenerate, 1.0, pooled))
    return d, degenerate


@dataclass
class NeuronProfile:
    mean_pop: np.ndarray
    std_pop: np.ndarray
    mean_unpop: np.ndarray
    std_unpop: np.ndarray
    mean_real: np.ndarray
    std_real: np.ndarray
    d: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.d), dtype=bool)

    @property
    def n_neurons(self) -> int:
        return len(self.d)

    @classmethod
    def from_stats(cls, pop: RunningStats, unpop: RunningStats, real: RunningStats) -> "NeuronProfile":
        d, deg = cohens_d(pop, unpop)
        return cls(pop.mean, pop.std, unpop.mean, unpop.std, real.mean, real.std, d, deg)

    _COLS = ("mean_pop", "std_pop", "mean_unpop", "std_unpop", "mean_real", "std_real", "d")

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("neuron_id," + ",".join(self._COLS) + ",degenerate\n")
            for j in range(self.n_neurons):
                vals = ",".join(f"{getattr(self, c)[j]:.17g}" for c in self._COLS)
                fh.write(f"{j},{vals},{int(self.degenerate[j])}\n")

    @classmethod
    def from_csv(cls, path) -> "NeuronProfile":
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        cols = {c: arr[:, i + 1] for i, c in enumerate(cls._COLS)}
        return cls(**cols, degenerate=arr[:, len(cls._COLS) + 1].astype(bool))


@dataclass
class NormalityReport:
    skewness: np.ndarray
    excess_kurtosis: np.ndarray
    pct_skew_ok: float
    pct_kurt_ok: float


def normality_diagnostics(activations: np.ndarray, skew_tol: float = 0.5, kurt_tol: float = 1.0) -> NormalityReport:
    """Moment skewness and excess kurtosis per column (neuron) of ``activations``."""
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if len(a) < 4:
        raise InsufficientSamples("need at least 4 samples per neuron")
    with np.errstate(invalid="ignore", divide="ignore"):
        sk = sps.skew(a, axis=0, bias=True)
        ku = sps.kurtosis(a, axis=0, fisher=True, bias=True)
    return NormalityReport(
        sk,
        ku,
        float(np.mean(np.abs(sk) < skew_tol)),
        float(np.mean(np.abs(ku) < kurt_tol)),
    )


def head_share(history, partition) -> float:
    history = np.asarray(history)
    if len(history) == 0:
        raise EmptyHistory("history is empty")
    return float(np.isin(history, partition.head_array).mean())


def head_shares(histories, partition) -> np.ndarray:
    head = partition.head_mask()
    return np.array([head[np.asarray(h)].mean() if len(h) else np.nan for h in histories])


@dataclass
class TopActivatorReport:
    neuron_id: int
    top_users: np.ndarray
    mean_h_top: float
    h_min: float
    h_q1: float
    h_median: float
    h_q3: float
    h_max: float


def rank_users_by_neuron(z_col: np.ndarray) -> np.ndarray:
    """Users ordered by activation descending, ties by user index."""
    z_col = np.asarray(z_col)
    return np.lexsort((np.arange(len(z_col)), -z_col))


def top_activator_report(neuron_id: int, activations: np.ndarray, shares: np.ndarray, top_n: int = 10) -> TopActivatorReport:
    """Mean head share of the ``top_n`` users with the largest z for one neuron.

    ``activations`` is the (users, N) hidden-activation matrix of real users and
    ``shares`` their head-item shares.
    """
    if len(shares) < top_n:
        raise ValueError(f"need at least {top_n} users")
    order = rank_users_by_neuron(activations[:, neuron_id])
    top = order[:top_n]
    q = np.percentile(shares, [0, 25, 50, 75, 100])
    return TopActivatorReport(int(neuron_id), top, float(shares[top].mean()), *map(float, q))


def select_neurons(d: np.ndarray, sign: str, threshold: float = 1.0) -> np.ndarray:
    """Neurons with d > threshold ("pos") or d < -threshold ("neg"), by |d| descending."""
    d = np.asarray(d)
    if sign == "pos":
        idx = np.flatnonzero(d > threshold)
    elif sign == "neg":
        idx = np.flatnonzero(d < -threshold)
    else:
        raise ValueError("sign must be 'pos' or 'neg'")
    return idx[np.lexsort((idx, -np.abs(d[idx])))]


def manipulation_study(sae: S.SaeParams, item_table: np.ndarray, X: np.ndarray, histories,
                       profile: NeuronProfile, K_prime: int, sign: str, k: int = 10,
                       metrics=None, threshold: float = 1.0) -> list[dict]:
    """Gini (and optional extra metrics) after lowering z_j by sigma_j for the top-k' neurons, k' = 0..K'."""
    from .ranking import rank_users
    from .steer import decode_hidden

    chosen = select_neurons(profile.d, sign, threshold)
    if K_prime > 0 and len(chosen) == 0:
        raise NoQualifyingNeurons(f"no neurons with {sign} d beyond {threshold}")
    if K_prime > len(chosen):
        raise NoQualifyingNeurons(f"only {len(chosen)} {sign} neurons qualify, asked for {K_prime}")
    Z = S.encode(sae, X)
    curve = []
    for kp in range(K_prime + 1):
        Zs = Z
        if kp:
            sel = chosen[:kp]
            Zs = Z.copy()
            Zs[:, sel] = Zs[:, sel] - profile.std_real[sel].astype(Z.dtype)
        lists = rank_users(item_table, decode_hidden(sae, Zs), histories, k)
        row = {"k_prime": kp, "gini": gini(exposure_counts(lists, len(item_table)))}
        if metrics is not None:
            row.update(metrics(lists))
        curve.append(row)
    return curve
