"""History-only next-session predictors: previous, running average and EMA.

Session indices are 1-based: ``history[k - 1]`` holds ``s_k`` and a predictor
for session ``i`` may read ``s_1 .. s_{i-1}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, InsufficientHistoryError


@dataclass
class EmaParams:
    alpha: float
    train_distance: float | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"EMA alpha must lie in (0, 1], got {self.alpha}")


@dataclass
class EmaFitConfig:
    init_alpha: float = 0.5
    iterations: int = 500
    lr: float = 0.1


def _prefix(history, i: int) -> np.ndarray:
    if i < 2:
        raise InsufficientHistoryError(f"session {i} has no prior history")
    H = np.asarray(history, dtype=np.float64)
    if i - 1 > len(H):
        raise InsufficientHistoryError(f"session {i} needs {i - 1} prior embeddings, got {len(H)}")
    return H[:i - 1]


def previous_predictor(history, i: int) -> np.ndarray:
    return _prefix(history, i)[-1].copy()


def average_predictor(history, i: int) -> np.ndarray:
    return _prefix(history, i).mean(axis=0)


def ema_predictor(history, i: int, p: EmaParams) -> np.ndarray:
    """``alpha * sum_k (1 - alpha)^(i-1-k) s_k`` over k = 1..i-1, left unnormalized."""
    H = _prefix(history, i)
    a = p.alpha
    powers = np.arange(i - 2, -1, -1)
    weights = a * (1.0 - a) ** powers
    return weights @ H


# ---------------------------------------------------------------- whole-history forms

def previous_all(E: np.ndarray) -> np.ndarray:
    """Predictions for sessions 2..N of one customer (row j predicts session j + 2)."""
    return np.asarray(E, dtype=np.float64)[:-1].copy()


def average_all(E: np.ndarray) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    return np.cumsum(E[:-1], axis=0) / np.arange(1, len(E))[:, None]


def ema_all(E: np.ndarray, alpha: float) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    out = np.zeros((max(len(E) - 1, 0), E.shape[1]))
    P = np.zeros(E.shape[1])
    for j in range(len(E) - 1):
        P = alpha * E[j] + (1.0 - alpha) * P
        out[j] = P
    return out


def _padded(histories):
    histories = [np.asarray(h, dtype=np.float64) for h in histories if len(h) >= 2]
    if not histories:
        raise ConfigError("EMA fitting needs at least one customer with two sessions")
    B = len(histories)
    T = max(len(h) for h in histories)
    d = histories[0].shape[1]
    E = np.zeros((B, T, d))
    mask = np.zeros((B, T))
    for r, h in enumerate(histories):
        E[r, :len(h)] = h
        mask[r, 1:len(h)] = 1.0
    return E, mask


def ema_objective(E: np.ndarray, mask: np.ndarray, alpha: float) -> tuple[float, float]:
    """Mean cosine distance of EMA predictions and its derivative w.r.t. alpha."""
    B, T, d = E.shape
    P = np.zeros((B, d))
    dP = np.zeros((B, d))
    total = grad = 0.0
    n = mask.sum()
    for t in range(1, T):
        # P_t = alpha * s_{t-1} + (1 - alpha) * P_{t-1}
        dP = E[:, t - 1] - P + (1.0 - alpha) * dP
        P = alpha * E[:, t - 1] + (1.0 - alpha) * P
        dist, cache = nc.cosine_distance(P, E[:, t])
        total += float(np.sum(dist * mask[:, t]))
        dpred, _ = nc.cosine_distance_backward(mask[:, t], cache)
        grad += float(np.sum(dpred * dP))
    return total / n, grad / n


def fit_ema_alpha(train_embeddings_by_customer, cfg: EmaFitConfig | None = None) -> EmaParams:
    """Gradient descent on ``theta`` with ``alpha = sigmoid(theta)``."""
    cfg = cfg or EmaFitConfig()
    if not 0.0 < cfg.init_alpha < 1.0:
        raise ConfigError("init_alpha must lie in (0, 1)")
    E, mask = _padded(list(train_embeddings_by_customer))
    theta = math.log(cfg.init_alpha / (1.0 - cfg.init_alpha))
    for _ in range(cfg.iterations):
        alpha = 1.0 / (1.0 + math.exp(-theta))
        _, g = ema_objective(E, mask, alpha)
        theta -= cfg.lr * g * alpha * (1.0 - alpha)
    alpha = 1.0 / (1.0 + math.exp(-theta))
    dist, _ = ema_objective(E, mask, alpha)
    return EmaParams(alpha, dist)
