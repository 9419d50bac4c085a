"""A small reverse-mode autodiff tape over numpy arrays.

Only the operations the encoder and the SAE need are provided. Each op records
a closure mapping the output gradient to its parents' gradients; ``backward``
walks the graph in reverse topological order and accumulates into leaf
``.grad`` arrays. Nodes built only from constants record nothing.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

# python floats, so float32 arrays stay float32
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def param(value) -> Var:
    return Var(np.asarray(value), requires_grad=True)


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(np.asarray(value))


def _node(value, parents, backward_fn) -> Var:
    if any(p.requires_grad for p in parents):
        return Var(value, parents, backward_fn, True)
    return Var(value)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Var, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.value) if grad is None else grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)),
    )


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)),
    )


def scale(a: Var, c: float) -> Var:
    return _node(a.value * c, (a,), lambda g: (g * c,))


def gelu(x: Var) -> Var:
    v = x.value
    cdf = erf(v * (1.0 / _SQRT2))
    cdf += 1.0
    cdf *= 0.5
    out = v * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return (g * (cdf + v * pdf),)

    return _node(out, (x,), bw)


def dropout(x: Var, p: float, rng: np.random.Generator | None) -> Var:
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.value.shape) >= p).astype(x.value.dtype) / (1.0 - p)
    return mul(x, Var(keep))


# ---------------------------------------------------------------- shape


def reshape(x: Var, shape) -> Var:
    old = x.value.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x: Var, a1: int, a2: int) -> Var:
    return _node(np.swapaxes(x.value, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def take_rows(x: Var, idx) -> Var:
    """``x[idx]`` along axis 0; repeated indices accumulate in the backward pass."""
    idx = np.asarray(idx)
    shape = x.value.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.value[idx], (x,), bw)


def slice_axis(x: Var, axis: int, sl: slice) -> Var:
    key = [slice(None)] * x.value.ndim
    key[axis] = sl
    key = tuple(key)
    shape = x.value.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[key] = g
        return (out,)

    return _node(x.value[key], (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Var:
    a, b = const(a), const(b)
    av, bv = a.value, b.value

    def bw(g):
        if bv.ndim == 2:
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _node(av @ bv, (a, b), bw)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float) -> Var:
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.value
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _node(out, (x, gain, bias), bw)


def masked_softmax(x: Var, allowed: np.ndarray) -> Var:
    """Softmax over the last axis restricted to ``allowed``; fully masked rows give zeros."""
    v = np.where(allowed, x.value, -np.inf)
    mx = v.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(v - mx)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), bw)


# ---------------------------------------------------------------- losses


def tied_softmax_xent(h: Var, table: Var, targets: np.ndarray, chunk: int = 4096,
                      cache_limit: int = 64_000_000) -> Var:
    """Mean over rows of full-softmax cross-entropy with logits ``h @ table.T``.

    Softmax probabilities are kept for the backward pass when the full
    (rows x items) matrix has at most ``cache_limit`` entries; otherwise
    logits are recomputed chunk by chunk.
    """
    hv, tv = h.value, table.value
    targets = np.asarray(targets)
    n = hv.shape[0]
    keep = n * tv.shape[0] <= cache_limit
    probs = []
    total = 0.0
    for s in range(0, n, chunk):
        logits = hv[s:s + chunk] @ tv.T
        rows = np.arange(len(logits))
        picked = logits[rows, targets[s:s + chunk]].astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        shift = picked - logits[rows, targets[s:s + chunk]]
        np.exp(logits, out=logits)
        z = logits.sum(axis=1, keepdims=True)
        total += float((np.log(z[:, 0]) - (picked - shift)).sum())
        if keep:
            logits /= z
            probs.append(logits)
    loss = np.asarray(total / n, dtype=hv.dtype)

    def bw(g):
        gh = np.empty_like(hv)
        gt = np.zeros_like(tv)
        c = float(g) / n
        for b, s in enumerate(range(0, n, chunk)):
            hc = hv[s:s + chunk]
            if keep:
                p = probs[b]
            else:
                p = hc @ tv.T
                p -= p.max(axis=1, keepdims=True)
                np.exp(p, out=p)
                p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(p)), targets[s:s + chunk]] -= 1.0
            p *= c
            gh[s:s + chunk] = p @ tv
            gt += p.T @ hc
        return gh, gt

    return _node(loss, (h, table), bw)


def sum_squares(x: Var) -> Var:
    v = x.value
    return _node(np.asarray((v * v).sum(), dtype=v.dtype), (x,), lambda g: (2.0 * g * v,))


def mean_rows_sq_norm(x: Var) -> Var:
    """Mean over rows of the squared L2 norm of each row."""
    v = x.value
    n = v.shape[0]
    return _node(np.asarray((v * v).sum() / n, dtype=v.dtype), (x,), lambda g: (2.0 * g * v / n,))


class Adam:
    """Adam over a dict of named arrays, updated in place."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.b1, self.b2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)

    def state(self) -> dict:
        out = {"t": np.int64(self.t)}
        out.update({f"m.{k}": v for k, v in self.m.items()})
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.array(state[f"m.{k}"])
            self.v[k] = np.array(state[f"v.{k}"])
