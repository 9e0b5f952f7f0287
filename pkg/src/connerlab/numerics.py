"""Dense float64 kernels with hand-written backward passes.

Every forward function returns its output together with a cache; the
matching ``*_backward`` takes the upstream gradient and the cache. The
recurrent kernels work on padded batches ``[B, T, d]`` plus per-row
lengths, which matches running each row on its own up to float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

EPS = 1e-12


class ShapeError(ValueError):
    pass


def checked(a, name="array") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


# ---------------------------------------------------------------------------
# affine / softmax / losses


def affine(x, W, b):
    if x.shape[-1] != W.shape[0] or b.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b.reshape(-1), (x, W)


def affine_backward(dout, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dx = dout @ W.T
    dW = x2.T @ d2
    db = d2.sum(axis=0, keepdims=True)
    return dx, dW, db


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dp, p):
    """Gradient w.r.t. logits given gradient ``dp`` w.r.t. ``p = softmax(z)``."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def cross_entropy(p, y):
    """Mean over rows of ``-log p[y]``; ``y`` is an int vector or one-hot matrix.

    Returns ``(loss, dp)``.
    """
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(p)
    onehot = _as_onehot(y, p.shape)
    clipped = np.maximum(p, EPS)
    loss = -(onehot * np.log(clipped)).sum() / n
    dp = np.where(p > EPS, -onehot / clipped, 0.0) / n
    return float(loss), dp


def _as_onehot(y, shape):
    y = np.asarray(y)
    if y.ndim == 2:
        return y.astype(np.float64)
    out = np.zeros(shape)
    out[np.arange(shape[0]), y] = 1.0
    return out


def entropy(p, axis=-1):
    p = np.asarray(p, dtype=np.float64)
    return -(p * np.log(np.maximum(p, EPS))).sum(axis=axis)


def sym_kl(p, l):
    """Mean over rows of ``(KL(p||l) + KL(l||p)) / 2``.

    Returns ``(value, dp, dl)``.
    """
    p = np.asarray(p, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if p.shape != l.shape:
        raise ShapeError(f"sym_kl: {p.shape} vs {l.shape}")
    n = p.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(p), np.zeros_like(l)
    pc, lc = np.maximum(p, EPS), np.maximum(l, EPS)
    logr = np.log(pc) - np.log(lc)
    val = 0.5 * ((p - l) * logr).sum() / n
    dp = 0.5 * (logr + np.where(p > EPS, (p - l) / pc, 0.0)) / n
    dl = 0.5 * (-logr + np.where(l > EPS, (l - p) / lc, 0.0)) / n
    return float(val), dp, dl


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# LSTM


def lstm_forward(x, lengths, Wx, Wh, b):
    """LSTM over a padded batch, optionally with a leading stack axis.

    ``x`` is ``[B, T, d]`` (or ``[D, B, T, d]`` with weights stacked as
    ``[D, ...]``, which runs ``D`` independent LSTMs in one time loop).
    Rows shorter than ``T`` keep their state frozen past their length and
    emit zeros there. Gate order in the ``4h`` columns is input, forget,
    output, candidate.
    """
    single = x.ndim == 3
    if single:
        x, Wx, Wh, b = x[None], Wx[None], Wh[None], b[None]
    D, B, T, _ = x.shape
    h_dim = Wh.shape[1]
    keep = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    valid = keep.astype(np.float64)
    xw = np.matmul(x, Wx[:, None]) + b[:, None]
    h = np.zeros((D, B, h_dim))
    c = np.zeros((D, B, h_dim))
    hs = np.zeros((D, B, T, h_dim))
    gates = np.empty((D, B, T, 4 * h_dim))
    cells = np.empty((D, B, T, h_dim))
    h_prev_all = np.empty((D, B, T, h_dim))
    c_prev_all = np.empty((D, B, T, h_dim))
    for t in range(T):
        h_prev_all[:, :, t] = h
        c_prev_all[:, :, t] = c
        a = xw[:, :, t] + np.matmul(h, Wh)
        ifo = sigmoid(a[..., :3 * h_dim])
        g = np.tanh(a[..., 3 * h_dim:])
        i, f, o = ifo[..., :h_dim], ifo[..., h_dim:2 * h_dim], ifo[..., 2 * h_dim:]
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        gates[:, :, t, :3 * h_dim] = ifo
        gates[:, :, t, 3 * h_dim:] = g
        cells[:, :, t] = tc
        k = keep[:, t:t + 1]
        h = np.where(k, h_new, h)
        c = np.where(k, c_new, c)
        hs[:, :, t] = np.where(k, h_new, 0.0)
    cache = (x, valid, Wx, Wh, gates, cells, h_prev_all, c_prev_all, single)
    return (hs[0] if single else hs), cache


def lstm_backward(dhs, cache):
    x, valid, Wx, Wh, gates, cells, h_prev_all, c_prev_all, single = cache
    if single:
        dhs = dhs[None]
    D, B, T, _ = x.shape
    h_dim = Wh.shape[1]
    da_all = np.zeros((D, B, T, 4 * h_dim))
    dh = np.zeros((D, B, h_dim))
    dc = np.zeros((D, B, h_dim))
    WhT = np.swapaxes(Wh, 1, 2)
    for t in range(T - 1, -1, -1):
        gt = gates[:, :, t]
        i, f, o, g = gt[..., :h_dim], gt[..., h_dim:2 * h_dim], gt[..., 2 * h_dim:3 * h_dim], gt[..., 3 * h_dim:]
        tc = cells[:, :, t]
        m = valid[:, t:t + 1]
        dh_new = m * (dh + dhs[:, :, t])
        dc_new = m * dc + dh_new * o * (1 - tc * tc)
        da = da_all[:, :, t]
        da[..., :h_dim] = dc_new * g * i * (1 - i)
        da[..., h_dim:2 * h_dim] = dc_new * c_prev_all[:, :, t] * f * (1 - f)
        da[..., 2 * h_dim:3 * h_dim] = dh_new * tc * o * (1 - o)
        da[..., 3 * h_dim:] = dc_new * i * (1 - g * g)
        dh = np.matmul(da, WhT) + (1 - m) * dh
        dc = dc_new * f + (1 - m) * dc
    da2 = da_all.reshape(D, B * T, 4 * h_dim)
    dx = np.matmul(da_all, np.swapaxes(Wx, 1, 2)[:, None])
    dWx = np.matmul(np.swapaxes(x.reshape(D, B * T, -1), 1, 2), da2)
    dWh = np.matmul(np.swapaxes(h_prev_all.reshape(D, B * T, h_dim), 1, 2), da2)
    db = da2.sum(axis=1, keepdims=True)
    if single:
        return dx[0], dWx[0], dWh[0], db[0]
    return dx, dWx, dWh, db


def _reverse_index(lengths, T):
    """Per-row index that reverses the first ``len`` steps and keeps padding."""
    idx = np.tile(np.arange(T), (len(lengths), 1))
    for r, n in enumerate(lengths):
        idx[r, :n] = np.arange(n - 1, -1, -1)
    return idx


def birnn_forward(x, lengths, fwd, bwd):
    """Bidirectional LSTM; ``fwd``/``bwd`` are ``(Wx, Wh, b)`` triples.

    Returns ``[B, T, 2h]``: forward states then backward states. Both
    directions share one time loop.
    """
    B, T, _ = x.shape
    rev = _reverse_index(lengths, T)
    rows = np.arange(B)[:, None]
    xs = np.stack([x, x[rows, rev]])
    W = [np.stack([a, b_]) for a, b_ in zip(fwd, bwd)]
    hs, cache = lstm_forward(xs, lengths, *W)
    out = np.concatenate([hs[0], hs[1][rows, rev]], axis=-1)
    return out, (cache, rev, fwd[1].shape[0])


def birnn_backward(dout, cache):
    """Returns ``(dx, (dWx, dWh, db) forward, (dWx, dWh, db) backward)``."""
    lcache, rev, h_dim = cache
    rows = np.arange(dout.shape[0])[:, None]
    dhs = np.stack([dout[..., :h_dim], dout[..., h_dim:][rows, rev]])
    dxs, dWx, dWh, db = lstm_backward(dhs, lcache)
    dx = dxs[0] + dxs[1][rows, rev]
    return dx, (dWx[0], dWh[0], db[0]), (dWx[1], dWh[1], db[1])


def birnn_single(seq, fwd, bwd):
    """Convenience wrapper: one ``[n, d]`` sequence to ``[n, 2h]``."""
    seq = np.asarray(seq, dtype=np.float64)
    out, _ = birnn_forward(seq[None], [len(seq)], fwd, bwd)
    return out[0]


# ---------------------------------------------------------------------------
# parameters, optimisation, gradient checking


@dataclass
class ParamStore:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        value = checked(value, name).copy()
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def accumulate(self, name, g):
        self.grads[name] += g.reshape(self.grads[name].shape)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.grads.items()},
        )

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState) -> None:
    """One in-place Adam update over every parameter; zeroes the gradients."""
    state.t += 1
    bc1 = 1 - state.beta1 ** state.t
    bc2 = 1 - state.beta2 ** state.t
    for name, w in store.params.items():
        g = store.grads[name]
        m = state.m.setdefault(name, np.zeros_like(w))
        v = state.v.setdefault(name, np.zeros_like(w))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        w -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        g.fill(0.0)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    samples: int
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    loss_fn: Callable[[ParamStore], float],
    store: ParamStore,
    analytic: dict[str, np.ndarray],
    eps: float = 1e-5,
    samples: int = 500,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare ``analytic`` gradients to central differences of ``loss_fn``.

    Up to ``samples`` coordinates per parameter are drawn without
    replacement. Relative error is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name in names or store.names():
        w = store.params[name]
        flat = w.reshape(-1)
        k = min(samples, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False) if k < flat.size else np.arange(flat.size)
        worst = 0.0
        for j in coords:
            old = flat[j]
            flat[j] = old + eps
            up = loss_fn(store)
            flat[j] = old - eps
            down = loss_fn(store)
            flat[j] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError(f"non-finite loss while perturbing {name}[{j}]")
            num = (up - down) / (2 * eps)
            ana = analytic[name].reshape(-1)[j]
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
        errors[name] = worst
    return GradCheckReport(errors, samples, tol)
