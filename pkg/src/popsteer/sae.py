"""TopK sparse autoencoder over user embeddings.

    z     = W_enc^T (x - b_pre)          hidden activations, N per input
    a     = TopAct_K(z)                  keep the K largest entries verbatim
    x_hat = W_dec a + b_pre

Training minimises ``mean ||x - x_hat||^2 + gamma * L_aux`` where ``L_aux`` asks
the dead neurons' top ``aux_k`` activations to reconstruct the (detached)
residual ``e = x - x_hat``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tape as T
from .ranking import topk_indices

log = logging.getLogger(__name__)


class DimensionMismatch(ValueError):
    pass


class DivergedLoss(FloatingPointError):
    pass


@dataclass
class SaeConfig:
    input_dim: int = 64
    scale: int = 32
    k: int = 48
    aux_k: int | None = None
    gamma: float = 1.0 / 32.0
    dead_threshold: int = 200_000
    lr: float = 1e-3
    batch: int = 2048
    epochs: int = 300
    warmup_sample: int = 10_000
    dtype: str = "float32"
    seed: int = 0

    @property
    def n_hidden(self) -> int:
        return self.scale * self.input_dim

    @property
    def aux_k_max(self) -> int:
        return 2 * self.k if self.aux_k is None else self.aux_k

    def validate(self) -> "SaeConfig":
        if not (0 < self.k < self.n_hidden):
            raise ValueError(f"need 0 < K < N, got K={self.k}, N={self.n_hidden}")
        if self.aux_k_max > self.n_hidden:
            raise ValueError("aux_k exceeds N")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        return self


@dataclass
class SaeParams:
    config: SaeConfig
    W_enc: np.ndarray = field(repr=False)
    W_dec: np.ndarray = field(repr=False)
    b_pre: np.ndarray = field(repr=False)

    @property
    def n_hidden(self) -> int:
        return self.W_enc.shape[1]

    @property
    def k(self) -> int:
        return self.config.k

    def arrays(self) -> dict:
        return {"W_enc": self.W_enc, "W_dec": self.W_dec, "b_pre": self.b_pre}

    def copy(self) -> "SaeParams":
        return SaeParams(self.config, self.W_enc.copy(), self.W_dec.copy(), self.b_pre.copy())


@dataclass
class DeadNeuronReport:
    n_dead: int
    counters: np.ndarray = field(repr=False)
    steps: int = 0
    recon_loss: list = field(default_factory=list)
    aux_loss: list = field(default_factory=list)
    seconds: float = 0.0

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,recon_loss,aux_loss\n")
            for e, (r, a) in enumerate(zip(self.recon_loss, self.aux_loss)):
                fh.write(f"{e},{r:.6g},{a:.6g}\n")


def init_sae(config: SaeConfig, warmup: np.ndarray | None = None) -> SaeParams:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    dt = np.dtype(config.dtype)
    d, n = config.input_dim, config.n_hidden
    W = rng.standard_normal((d, n))
    W /= np.linalg.norm(W, axis=0, keepdims=True)
    b = np.zeros(d) if warmup is None else np.asarray(warmup, dtype=np.float64).mean(axis=0)
    return SaeParams(config, W.astype(dt), W.copy().astype(dt), b.astype(dt))


def _check_dim(x: np.ndarray, d: int) -> None:
    if x.shape[-1] != d:
        raise DimensionMismatch(f"expected last dimension {d}, got {x.shape[-1]}")


def encode(params: SaeParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    _check_dim(x, params.W_enc.shape[0])
    return (x - params.b_pre) @ params.W_enc


def topact_mask(z: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the K largest entries per row (ties to the lower index)."""
    z = np.asarray(z)
    flat = z.reshape(-1, z.shape[-1])
    idx = topk_indices(flat, k)
    mask = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=1)
    return mask.reshape(z.shape)


def top_act(z: np.ndarray, k: int) -> np.ndarray:
    z = np.asarray(z)
    if k > z.shape[-1]:
        raise ValueError("K exceeds the number of neurons")
    return np.where(topact_mask(z, k), z, 0.0).astype(z.dtype)


def decode(params: SaeParams, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    _check_dim(a, params.W_dec.shape[1])
    return a @ params.W_dec.T + params.b_pre


def reconstruct(params: SaeParams, x: np.ndarray) -> np.ndarray:
    return decode(params, top_act(encode(params, x), params.k))


def aux_mask(z: np.ndarray, dead: np.ndarray, aux_k: int) -> np.ndarray:
    """Top ``aux_k`` entries per row restricted to dead neurons."""
    n_dead = int(dead.sum())
    k = min(aux_k, n_dead)
    if k == 0:
        return np.zeros(z.shape, dtype=bool)
    zd = np.where(dead, z, -np.inf)
    return topact_mask(zd, k) & dead


def _loss_graph(vars_, x, dead, k, aux_k, residual=None):
    xc = T.sub(T.const(x), vars_["b_pre"])
    z = T.matmul(xc, vars_["W_enc"])
    keep = topact_mask(z.value, k)
    a = T.mul(z, keep.astype(z.value.dtype))
    xhat = T.add(T.matmul(a, T.swapaxes(vars_["W_dec"], 0, 1)), vars_["b_pre"])
    recon = T.mean_rows_sq_norm(T.sub(T.const(x), xhat))
    if dead is None or not dead.any():
        return recon, None, z, keep
    amask = aux_mask(z.value, dead, aux_k)
    e = (x - xhat.value) if residual is None else residual
    zp = T.mul(z, amask.astype(z.value.dtype))
    ehat = T.matmul(zp, T.swapaxes(vars_["W_dec"], 0, 1))
    aux = T.mean_rows_sq_norm(T.sub(T.const(e), ehat))
    return recon, aux, z, keep


def sae_loss(params: SaeParams, x: np.ndarray, dead_mask: np.ndarray | None = None) -> tuple[float, float]:
    """(recon_loss, aux_loss) for a batch; aux is 0 when no neuron is dead."""
    x = np.atleast_2d(np.asarray(x))
    _check_dim(x, params.W_enc.shape[0])
    vars_ = {k: T.const(v) for k, v in params.arrays().items()}
    recon, aux, _, _ = _loss_graph(vars_, x, dead_mask, params.k, params.config.aux_k_max)
    return float(recon.value), 0.0 if aux is None else float(aux.value)


def sae_loss_and_grads(params: SaeParams, x: np.ndarray, dead_mask=None, residual=None, parts=("recon", "aux")):
    """Loss ``recon + gamma * aux`` (restricted to ``parts``) and its gradients.

    The residual in the auxiliary term is a constant; pass ``residual`` to pin it.
    """
    x = np.atleast_2d(np.asarray(x))
    vars_ = {k: T.param(v) for k, v in params.arrays().items()}
    recon, aux, z, keep = _loss_graph(vars_, x, dead_mask, params.k, params.config.aux_k_max, residual)
    total = recon if "recon" in parts else None
    if aux is not None and "aux" in parts:
        term = T.scale(aux, params.config.gamma)
        total = term if total is None else T.add(total, term)
    grads = {k: np.zeros_like(v.value) for k, v in vars_.items()}
    if total is not None:
        T.backward(total)
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in vars_.items()}
    info = {
        "recon": float(recon.value),
        "aux": 0.0 if aux is None else float(aux.value),
        "loss": 0.0 if total is None else float(total.value),
        "fired": keep.any(axis=0),
    }
    return info, grads


def train_sae(embeddings: np.ndarray, config: SaeConfig) -> tuple[SaeParams, DeadNeuronReport]:
    """Adam on the reconstruction + auxiliary objective, reshuffling the corpus each epoch."""
    config.validate()
    X = np.asarray(embeddings, dtype=np.dtype(config.dtype))
    _check_dim(X, config.input_dim)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    warm = X[rng.permutation(len(X))[: config.warmup_sample]]
    params = init_sae(config, warm)
    arrays = params.arrays()
    opt = T.Adam(arrays, lr=config.lr)
    counters = np.zeros(config.n_hidden, dtype=np.int64)
    report = DeadNeuronReport(0, counters)
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        perm = rng.permutation(len(X))
        rsum = asum = 0.0
        for s in range(0, len(perm), config.batch):
            xb = X[perm[s:s + config.batch]]
            dead = counters > config.dead_threshold
            info, grads = sae_loss_and_grads(params, xb, dead)
            if not np.isfinite(info["loss"]):
                raise DivergedLoss(f"non-finite SAE loss at epoch {epoch}")
            opt.step(arrays, grads)
            counters += len(xb)
            counters[info["fired"]] = 0
            rsum += info["recon"] * len(xb)
            asum += info["aux"] * len(xb)
            report.steps += 1
        report.recon_loss.append(rsum / len(X))
        report.aux_loss.append(asum / len(X))
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.info("sae epoch %d recon %.5f aux %.5f dead %d", epoch, rsum / len(X), asum / len(X),
                     int((counters > config.dead_threshold).sum()))
    report.n_dead = int((counters > config.dead_threshold).sum())
    report.counters = counters
    report.seconds = time.perf_counter() - t0
    return params, report


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return (a * b).sum(axis=-1) / np.where(den > 0, den, 1.0)


@dataclass
class FidelityReport:
    cosine_mean: float
    cosine_min: float
    ndcg_orig: float
    ndcg_recon: float

    @property
    def ndcg_rel_drop(self) -> float:
        return abs(self.ndcg_recon - self.ndcg_orig) / self.ndcg_orig if self.ndcg_orig else 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["ndcg_rel_drop"] = self.ndcg_rel_drop
        return d


def reconstruction_report(params: SaeParams, embeddings: np.ndarray, item_table=None, histories=None,
                          targets=None, k: int = 10) -> FidelityReport:
    """Cosine(x, x_hat) statistics and, given a catalog, nDCG@k with x vs x_hat."""
    from .fairmetrics import batch_ndcg
    from .ranking import rank_users

    X = np.asarray(embeddings)
    Xh = reconstruct(params, X)
    cos = cosine_similarity(X, Xh)
    n_orig = n_rec = float("nan")
    if item_table is not None:
        n_orig = batch_ndcg(rank_users(item_table, X, histories, k), targets, k)
        n_rec = batch_ndcg(rank_users(item_table, Xh, histories, k), targets, k)
    return FidelityReport(float(cos.mean()), float(cos.min()), n_orig, n_rec)
