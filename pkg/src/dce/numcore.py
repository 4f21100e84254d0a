"""Small differentiable-compute core.

Every primitive is a pair of plain functions: a forward pass that returns its
output (plus a cache where the backward pass needs one) and a backward pass
that maps an upstream gradient to gradients w.r.t. inputs and parameters.
Arrays may carry any number of leading batch axes; parameter gradients are
summed over them.  Parameters live in ``dict[str, np.ndarray]`` and so do
their gradients, keyed identically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import DimensionError, NumericError

Params = dict[str, np.ndarray]

COSINE_EPS = 1e-8
CLIP_NORM = 5.0


def as_real(x) -> np.ndarray:
    """View ``x`` as a real array of at least 64-bit precision (wider kept)."""
    x = np.asarray(x)
    if x.dtype.kind != "f" or x.dtype.itemsize < 8:
        return x.astype(np.float64)
    return x


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = as_real(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_last(x: np.ndarray, n: int, what: str) -> None:
    if x.shape[-1] != n:
        raise DimensionError(f"{what}: expected last axis {n}, got shape {x.shape}")


# ---------------------------------------------------------------- linear

def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map ``W @ x + b`` applied along the last axis of ``x``."""
    x = as_real(x)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise DimensionError(f"linear: W {W.shape} and b {b.shape} do not conform")
    _check_last(x, W.shape[1], "linear input")
    return x @ W.T + b


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Return ``(dx, dW, db)`` for ``y = linear_forward(x, W, b)``."""
    dx = dy @ W
    dy2 = dy.reshape(-1, dy.shape[-1])
    x2 = as_real(x).reshape(-1, x.shape[-1])
    return dx, dy2.T @ x2, dy2.sum(axis=0)


# ---------------------------------------------------------------- embedding

def embedding_lookup(table: np.ndarray, idx) -> np.ndarray:
    idx_arr = np.asarray(idx)
    if not np.issubdtype(idx_arr.dtype, np.integer):
        raise TypeError(f"embedding index must be integer, got {idx_arr.dtype}")
    V = table.shape[0]
    if idx_arr.size and (idx_arr.min() < 0 or idx_arr.max() >= V):
        raise IndexError(f"embedding index out of range [0, {V})")
    return table[idx_arr]


def embedding_backward(dout: np.ndarray, idx, vocab_size: int) -> np.ndarray:
    """Scatter-add ``dout`` into the rows that were looked up."""
    idx_arr = np.asarray(idx).reshape(-1)
    grad = np.zeros((vocab_size, dout.shape[-1]), dtype=as_real(dout).dtype)
    np.add.at(grad, idx_arr, dout.reshape(-1, dout.shape[-1]))
    return grad


# ---------------------------------------------------------------- lstm

class LstmCache(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


def init_lstm(rng: np.random.Generator, n_in: int, hidden: int) -> Params:
    """Uniform(+-1/sqrt(h)) weights, forget-gate bias 1, other biases 0."""
    if n_in <= 0 or hidden <= 0:
        raise DimensionError("LSTM sizes must be positive")
    bound = 1.0 / math.sqrt(hidden)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return {
        "W": rng.uniform(-bound, bound, size=(4 * hidden, n_in)),
        "U": rng.uniform(-bound, bound, size=(4 * hidden, hidden)),
        "b": b,
    }


def lstm_cell_step(x, h_prev, c_prev, W, U, b):
    """One LSTM step with gate blocks ordered (input, forget, candidate, output).

    Returns ``(h, c, cache)``.
    """
    hidden = U.shape[1]
    if U.shape != (4 * hidden, hidden) or W.shape[0] != 4 * hidden or b.shape != (4 * hidden,):
        raise DimensionError(f"LSTM params do not conform: W {W.shape} U {U.shape} b {b.shape}")
    x = as_real(x)
    _check_last(x, W.shape[1], "lstm input")
    _check_last(h_prev, hidden, "lstm h_prev")
    _check_last(c_prev, hidden, "lstm c_prev")
    z = x @ W.T + h_prev @ U.T + b
    i = sigmoid(z[..., :hidden])
    f = sigmoid(z[..., hidden:2 * hidden])
    g = np.tanh(z[..., 2 * hidden:3 * hidden])
    o = sigmoid(z[..., 3 * hidden:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, LstmCache(x, h_prev, c_prev, i, f, g, o, tanh_c)


def lstm_cell_backward(dh, dc, cache: LstmCache, W, U):
    """Return ``(dx, dh_prev, dc_prev, grads)`` where grads has keys W, U, b."""
    x, h_prev, c_prev, i, f, g, o, tanh_c = cache
    do = dh * tanh_c
    dc_total = dc + dh * o * (1.0 - tanh_c ** 2)
    dz = np.concatenate([
        dc_total * g * i * (1.0 - i),
        dc_total * c_prev * f * (1.0 - f),
        dc_total * i * (1.0 - g ** 2),
        do * o * (1.0 - o),
    ], axis=-1)
    dz2 = dz.reshape(-1, dz.shape[-1])
    grads = {
        "W": dz2.T @ x.reshape(-1, x.shape[-1]),
        "U": dz2.T @ h_prev.reshape(-1, h_prev.shape[-1]),
        "b": dz2.sum(axis=0),
    }
    return dz @ W, dz @ U, dc_total * f, grads


# ---------------------------------------------------------------- mlp

def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / math.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out)


def init_mlp(rng: np.random.Generator, n_in: int, n_hidden: int, n_out: int) -> Params:
    W1, b1 = init_linear(rng, n_in, n_hidden)
    W2, b2 = init_linear(rng, n_hidden, n_out)
    return {"W1": W1, "b1": b1, "W2": W2, "b2": b2}


def mlp_forward(x, p: Params):
    """One tanh hidden layer followed by a linear output."""
    a = np.tanh(linear_forward(x, p["W1"], p["b1"]))
    return linear_forward(a, p["W2"], p["b2"]), (x, a)


def mlp_backward(dy, cache, p: Params):
    x, a = cache
    da, dW2, db2 = linear_backward(dy, a, p["W2"])
    dpre = da * (1.0 - a ** 2)
    dx, dW1, db1 = linear_backward(dpre, x, p["W1"])
    return dx, {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


# ---------------------------------------------------------------- cosine

def cosine_distance(a, b, eps: float = COSINE_EPS):
    """``1 - a.b / (max(|a|, eps) * max(|b|, eps))`` along the last axis.

    Returns ``(distance, cache)``; ``distance`` has the batch shape.
    """
    a = as_real(a)
    b = as_real(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine: shapes {a.shape} and {b.shape} differ")
    na_raw = np.linalg.norm(a, axis=-1)
    nb_raw = np.linalg.norm(b, axis=-1)
    na = np.maximum(na_raw, eps)
    nb = np.maximum(nb_raw, eps)
    dot = np.sum(a * b, axis=-1)
    dist = 1.0 - dot / (na * nb)
    return dist, (a, b, na_raw, nb_raw, na, nb, dot, eps)


def cosine_distance_value(a, b, eps: float = COSINE_EPS):
    return cosine_distance(a, b, eps)[0]


def cosine_distance_backward(dout, cache):
    a, b, na_raw, nb_raw, na, nb, dot, eps = cache
    dout = as_real(dout)[..., None]
    na_, nb_, dot_ = na[..., None], nb[..., None], dot[..., None]
    # the clamped norm has zero derivative below eps
    ua = np.where((na_raw > eps)[..., None], a / na_, 0.0)
    ub = np.where((nb_raw > eps)[..., None], b / nb_, 0.0)
    dcos_da = b / (na_ * nb_) - dot_ / (na_ ** 2 * nb_) * ua
    dcos_db = a / (na_ * nb_) - dot_ / (na_ * nb_ ** 2) * ub
    return -dout * dcos_da, -dout * dcos_db


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: Params, grads: Params, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError("Adam betas must lie in [0, 1)")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        if m.shape != p.shape:
            raise DimensionError(f"Adam state for {k!r} has shape {m.shape}, param {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Params, max_norm: float = CLIP_NORM) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient norm {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_into(acc: Params, grads: Params, prefix: str = "") -> None:
    for k, g in grads.items():
        acc[prefix + k] += g


def subparams(params: Params, prefix: str) -> Params:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------- grad check

def grad_check(fn: Callable[[Params], tuple[float, Params]], params: Params,
               eps: float = 1e-4, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn(params)`` must return ``(loss, grads)`` and read ``params`` by
    reference; coordinates are perturbed in place and restored afterwards.
    With ``max_coords`` set, at most that many coordinates per tensor are
    sampled (using ``rng``).
    """
    loss, analytic = fn(params)
    if not np.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss}")
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        g = analytic[name]
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for j in coords:
            old = flat[j]
            flat[j] = old + eps
            up = fn(params)[0]
            flat[j] = old - eps
            down = fn(params)[0]
            flat[j] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{j}]")
            numeric = (up - down) / (2.0 * eps)
            a = g.reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
