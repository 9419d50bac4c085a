"""Causal self-attention sequence encoder (SASRec-style, post-LN) trained with full-softmax CE.

Sequences are left-padded to ``max_seq_len`` with ``-1``. The final position of
the last layer is the user embedding; scores are dot products with the shared
item embedding table.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tape as T
from .data import SplitDataset

log = logging.getLogger(__name__)

PAD = -1


class InvalidConfig(ValueError):
    pass


class EmptySequence(ValueError):
    pass


class DivergedLoss(FloatingPointError):
    pass


@dataclass
class EncoderConfig:
    hidden_size: int = 64
    layers: int = 2
    heads: int = 2
    ffn_size: int = 256
    max_seq_len: int = 50
    dropout: float = 0.5
    attn_dropout: float = 0.5
    lr: float = 1e-3
    batch: int = 256
    patience: int = 10
    max_epochs: int = 200
    init_std: float = 0.02
    ln_eps: float = 1e-12
    eval_k: int = 10
    loss_chunk: int = 4096
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> "EncoderConfig":
        if self.hidden_size < 1 or self.heads < 1 or self.layers < 0:
            raise InvalidConfig("sizes must be positive")
        if self.hidden_size % self.heads:
            raise InvalidConfig(f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")
        if self.max_seq_len < 1:
            raise InvalidConfig("max_seq_len must be >= 1")
        if not (0.0 <= self.dropout < 1.0 and 0.0 <= self.attn_dropout < 1.0):
            raise InvalidConfig("dropout must lie in [0, 1)")
        if self.lr < 0 or self.batch < 1:
            raise InvalidConfig("lr must be >= 0 and batch >= 1")
        return self


@dataclass
class EncoderParams:
    config: EncoderConfig
    n_items: int
    arrays: dict = field(repr=False)

    @property
    def item_embeddings(self) -> np.ndarray:
        return self.arrays["item_emb"]

    def copy(self) -> "EncoderParams":
        return EncoderParams(copy.deepcopy(self.config), self.n_items, {k: v.copy() for k, v in self.arrays.items()})


@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_ndcg: list = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_ndcg\n")
            for e, l, v in zip(self.epochs, self.train_loss, self.val_ndcg):
                fh.write(f"{e},{l:.6g},{v:.6g}\n")


def init_encoder(config: EncoderConfig, n_items: int) -> EncoderParams:
    config.validate()
    if n_items < 1:
        raise InvalidConfig("n_items must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    dt = np.dtype(config.dtype)
    d, f, std = config.hidden_size, config.ffn_size, config.init_std

    def w(*shape):
        return (rng.standard_normal(shape) * std).astype(dt)

    def zeros(*shape):
        return np.zeros(shape, dtype=dt)

    a = {
        "item_emb": w(n_items, d),
        "pos_emb": w(config.max_seq_len, d),
        "emb_ln.g": np.ones(d, dtype=dt),
        "emb_ln.b": zeros(d),
    }
    for l in range(config.layers):
        p = f"l{l}."
        for name in ("q", "k", "v", "o"):
            a[p + f"w{name}"] = w(d, d)
            a[p + f"b{name}"] = zeros(d)
        a[p + "ln1.g"] = np.ones(d, dtype=dt)
        a[p + "ln1.b"] = zeros(d)
        a[p + "w1"] = w(d, f)
        a[p + "b1"] = zeros(f)
        a[p + "w2"] = w(f, d)
        a[p + "b2"] = zeros(d)
        a[p + "ln2.g"] = np.ones(d, dtype=dt)
        a[p + "ln2.b"] = zeros(d)
    return EncoderParams(config, n_items, a)


def pad_sequences(seqs, max_len: int) -> np.ndarray:
    """Left-pad (and left-truncate) to ``max_len`` with PAD."""
    out = np.full((len(seqs), max_len), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        s = np.asarray(s)[-max_len:]
        if len(s):
            out[r, max_len - len(s):] = s
    return out


def _forward(vars_: dict, cfg: EncoderConfig, ids: np.ndarray, rng=None, last_only: bool = False) -> T.Var:
    """Hidden states (B, M, d), or (B, d) at the final position when ``last_only``."""
    B, M = ids.shape
    d, h = cfg.hidden_size, cfg.heads
    dh = d // h
    valid = ids != PAD
    p_hidden = cfg.dropout if rng is not None else 0.0
    p_attn = cfg.attn_dropout if rng is not None else 0.0
    P = cfg.max_seq_len

    emb = T.take_rows(vars_["item_emb"], np.where(valid, ids, 0))
    emb = T.mul(emb, valid[..., None].astype(emb.value.dtype))
    pos = T.slice_axis(vars_["pos_emb"], 0, slice(P - M, P))
    x = T.layer_norm(T.add(emb, pos), vars_["emb_ln.g"], vars_["emb_ln.b"], cfg.ln_eps)
    x = T.dropout(x, p_hidden, rng)

    causal = np.tril(np.ones((M, M), dtype=bool))
    allowed_full = causal[None, None] & valid[:, None, None, :]
    scale = 1.0 / math.sqrt(dh)

    def heads(t: T.Var, rows: int) -> T.Var:
        return T.swapaxes(T.reshape(t, (B, rows, h, dh)), 1, 2)

    for l in range(cfg.layers):
        p = f"l{l}."
        last = last_only and l == cfg.layers - 1
        xq = T.slice_axis(x, 1, slice(M - 1, M)) if last else x
        rows = 1 if last else M
        q = heads(T.add(T.matmul(xq, vars_[p + "wq"]), vars_[p + "bq"]), rows)
        k = heads(T.add(T.matmul(x, vars_[p + "wk"]), vars_[p + "bk"]), M)
        v = heads(T.add(T.matmul(x, vars_[p + "wv"]), vars_[p + "bv"]), M)
        scores = T.scale(T.matmul(q, T.swapaxes(k, 2, 3)), scale)
        allowed = allowed_full[:, :, M - 1:M, :] if last else allowed_full
        probs = T.dropout(T.masked_softmax(scores, allowed), p_attn, rng)
        ctx = T.reshape(T.swapaxes(T.matmul(probs, v), 1, 2), (B, rows, d))
        o = T.dropout(T.add(T.matmul(ctx, vars_[p + "wo"]), vars_[p + "bo"]), p_hidden, rng)
        x1 = T.layer_norm(T.add(xq, o), vars_[p + "ln1.g"], vars_[p + "ln1.b"], cfg.ln_eps)
        f = T.gelu(T.add(T.matmul(x1, vars_[p + "w1"]), vars_[p + "b1"]))
        f = T.dropout(T.add(T.matmul(f, vars_[p + "w2"]), vars_[p + "b2"]), p_hidden, rng)
        x = T.layer_norm(T.add(x1, f), vars_[p + "ln2.g"], vars_[p + "ln2.b"], cfg.ln_eps)
    if last_only:
        x = T.reshape(T.slice_axis(x, 1, slice(x.value.shape[1] - 1, None)), (B, d))
    return x


def hidden_states(params: EncoderParams, ids: np.ndarray) -> np.ndarray:
    """Eval-mode hidden states at every position, shape (B, M, d)."""
    vars_ = {k: T.const(v) for k, v in params.arrays.items()}
    return _forward(vars_, params.config, np.asarray(ids)).value


def encode_batch(params: EncoderParams, seqs, batch: int = 1024, train_mode: bool = False, rng=None) -> np.ndarray:
    """User embeddings (n, d) for a list of item sequences."""
    cfg = params.config
    if any(len(s) == 0 for s in seqs):
        raise EmptySequence("every sequence needs at least one item")
    vars_ = {k: T.const(v) for k, v in params.arrays.items()}
    out = np.empty((len(seqs), cfg.hidden_size), dtype=params.arrays["item_emb"].dtype)
    for s in range(0, len(seqs), batch):
        ids = pad_sequences(seqs[s:s + batch], cfg.max_seq_len)
        out[s:s + batch] = _forward(vars_, cfg, ids, rng if train_mode else None, last_only=True).value
    return out


def encode_user(params: EncoderParams, sequence, train_mode: bool = False, rng=None) -> np.ndarray:
    if len(sequence) == 0:
        raise EmptySequence("sequence is empty")
    if train_mode and rng is None:
        rng = np.random.default_rng(params.config.seed)
    return encode_batch(params, [np.asarray(sequence)], train_mode=train_mode, rng=rng)[0]


def score_all(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Dot product of embedding(s) ``x`` with every item embedding."""
    x = np.asarray(x)
    if x.shape[-1] != params.config.hidden_size:
        raise ValueError(f"embedding dim {x.shape[-1]} != {params.config.hidden_size}")
    return x @ params.item_embeddings.T


# ---------------------------------------------------------------- training


def training_windows(train_seqs, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Cut each sequence into windows of ``max_len + 1`` items ending at its end.

    Returns left-padded (inputs, targets) so every item after the first of a
    sequence is a target exactly once.
    """
    inputs, targets = [], []
    for s in train_seqs:
        s = np.asarray(s)
        end = len(s)
        while end >= 2:
            w = s[max(0, end - max_len - 1):end]
            inputs.append(w[:-1])
            targets.append(w[1:])
            end -= max_len
    return pad_sequences(inputs, max_len), pad_sequences(targets, max_len)


def compute_loss_and_grads(params: EncoderParams, inputs: np.ndarray, targets: np.ndarray, rng=None):
    """Mean next-item CE over all non-padded positions and its exact gradient."""
    inputs, targets = np.asarray(inputs), np.asarray(targets)
    if inputs.size == 0:
        raise ValueError("empty batch")
    cfg = params.config
    vars_ = {k: T.param(v) for k, v in params.arrays.items()}
    h = _forward(vars_, cfg, inputs, rng)
    mask = targets.reshape(-1) != PAD
    rows = T.take_rows(T.reshape(h, (-1, cfg.hidden_size)), np.flatnonzero(mask))
    loss = T.tied_softmax_xent(rows, vars_["item_emb"], targets.reshape(-1)[mask], cfg.loss_chunk)
    T.backward(loss)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in vars_.items()}
    return float(loss.value), grads


def evaluate_ndcg(params: EncoderParams, histories, targets, k: int = 10, batch: int = 1024) -> float:
    from .ranking import rank_users
    from .fairmetrics import batch_ndcg

    x = encode_batch(params, histories, batch=batch)
    lists = rank_users(params.item_embeddings, x, histories, k)
    return batch_ndcg(lists, targets, k)


def train_encoder(
    data: SplitDataset,
    config: EncoderConfig,
    state_path=None,
    resume: bool = False,
    callback=None,
) -> tuple[EncoderParams, TrainingHistory]:
    """Adam on all-position CE with early stopping on validation nDCG@k.

    With ``state_path`` the full training state (params, optimizer, RNG, best
    checkpoint) is written after every epoch; ``resume`` continues from it.
    """
    from . import io as pio

    config.validate()
    if data.n_users == 0 or not any(len(t) >= 2 for t in data.train):
        raise ValueError("training data has no next-item targets")
    params = init_encoder(config, data.n_items)
    opt = T.Adam(params.arrays, lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    inputs, targets = training_windows(data.train, config.max_seq_len)
    val_hist, val_tgt = data.history("valid"), data.targets("valid")
    hist = TrainingHistory()
    best, best_score, since_best, start_epoch = params.copy(), -np.inf, 0, 0

    if resume and state_path is not None and pio.exists(state_path):
        st = pio.load_train_state(state_path)
        params.arrays.update(st["params"])
        opt.load_state(st["opt"])
        rng.bit_generator.state = st["rng"]
        best = EncoderParams(config, data.n_items, st["best"])
        best_score, since_best, start_epoch = st["best_score"], st["since_best"], st["epoch"]
        hist = st["history"]

    t0 = time.perf_counter()
    for epoch in range(start_epoch, config.max_epochs):
        if since_best >= config.patience:
            break
        perm = rng.permutation(len(inputs))
        losses, weights = [], []
        for s in range(0, len(perm), config.batch):
            idx = perm[s:s + config.batch]
            loss, grads = compute_loss_and_grads(params, inputs[idx], targets[idx], rng)
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            opt.step(params.arrays, grads)
            losses.append(loss)
            weights.append(int((targets[idx] != PAD).sum()))
        train_loss = float(np.average(losses, weights=weights))
        score = evaluate_ndcg(params, val_hist, val_tgt, config.eval_k)
        hist.epochs.append(epoch)
        hist.train_loss.append(train_loss)
        hist.val_ndcg.append(score)
        if score > best_score:
            best_score, best, since_best = score, params.copy(), 0
            hist.best_epoch = epoch
        else:
            since_best += 1
        log.info("encoder epoch %d loss %.4f val_ndcg@%d %.4f", epoch, train_loss, config.eval_k, score)
        if callback is not None:
            callback(epoch, train_loss, score)
        if state_path is not None:
            pio.save_train_state(
                state_path,
                params=params.arrays,
                opt=opt.state(),
                rng=rng.bit_generator.state,
                best=best.arrays,
                best_score=best_score,
                since_best=since_best,
                epoch=epoch + 1,
                history=hist,
            )
    hist.seconds += time.perf_counter() - t0
    return best, hist


def config_dict(config: EncoderConfig) -> dict:
    return asdict(config)
