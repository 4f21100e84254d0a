"""Metrics, a logistic-regression probe and the downstream task harnesses.

Probes only ever see labels from training-split sessions: the harnesses build
their training matrices from ``dataset.train`` and read test labels only
after the probe is fitted.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import minimize
from scipy.stats import rankdata

from . import baselines as bl
from . import dce_model as dm
from . import numcore as nc
from .errors import ConfigError, DegenerateClassError, DimensionError, NumericError
from .synthgen import INTENTS


@dataclass
class ScoredLabels:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise DimensionError(f"{self.scores.size} scores vs {self.labels.size} labels")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")
        self.labels = self.labels.astype(np.int64)


def _as_scored(sl, labels=None) -> ScoredLabels:
    if isinstance(sl, ScoredLabels):
        return sl
    return ScoredLabels(sl, labels)


# ---------------------------------------------------------------- metrics

def auroc(sl, labels=None) -> float:
    """Mann-Whitney AUROC with half credit for ties (midranks)."""
    sl = _as_scored(sl, labels)
    n_pos = int(sl.labels.sum())
    n_neg = sl.labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError(f"AUROC needs both classes (pos={n_pos}, neg={n_neg})")
    ranks = rankdata(sl.scores)
    u = ranks[sl.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MacroAuroc:
    value: float
    per_class: dict[int, float]
    skipped: list[int]

    def to_dict(self, names=None) -> dict:
        name = (lambda j: names[j]) if names is not None else str
        return {"macro_auroc": self.value,
                "per_class": {name(j): v for j, v in self.per_class.items()},
                "skipped": [name(j) for j in self.skipped]}


def macro_auroc(scores, labels) -> MacroAuroc:
    """Mean per-class AUROC; classes lacking a positive or a negative are skipped."""
    S = np.asarray(scores, dtype=np.float64)
    Y = np.asarray(labels)
    if S.ndim != 2 or S.shape != Y.shape or S.shape[1] < 1:
        raise DimensionError(f"scores {S.shape} and labels {Y.shape} must be equal N x C")
    per, skipped = {}, []
    for j in range(S.shape[1]):
        try:
            per[j] = auroc(S[:, j], Y[:, j])
        except DegenerateClassError:
            skipped.append(j)
    if not per:
        raise DegenerateClassError("every class is degenerate")
    # exact rational mean, so the result does not depend on summation order
    mean = sum(map(Fraction, per.values())) / len(per)
    return MacroAuroc(float(mean), per, skipped)


def challenge_count(n: int, rate: float) -> int:
    # rounding first keeps e.g. 0.07 * 100 from ceiling to 8
    return int(math.ceil(round(rate * n, 9)))


def recall_at_challenge_rate(sl, rate: float, labels=None) -> float:
    """Recall when the ``ceil(rate * N)`` highest-scored sessions are challenged.

    Ties are broken by ascending index.
    """
    if labels is not None or not isinstance(sl, ScoredLabels):
        sl = _as_scored(sl, labels)
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"challenge rate must lie in (0, 1], got {rate}")
    n_pos = int(sl.labels.sum())
    if n_pos == 0:
        raise DegenerateClassError("recall is undefined without positive labels")
    k = challenge_count(sl.labels.size, rate)
    order = np.lexsort((np.arange(sl.scores.size), -sl.scores))
    return float(sl.labels[order[:k]].sum() / n_pos)


# ---------------------------------------------------------------- linear probe

@dataclass
class ProbeConfig:
    l2: float = 1e-3
    max_iter: int = 1000
    tol: float = 1e-10
    seed: int = 0

    def validate(self) -> None:
        if self.l2 < 0 or self.max_iter < 1 or self.tol < 0:
            raise ConfigError(f"invalid probe config {self}")


@dataclass
class LinearProbe:
    W: np.ndarray           # n_features x n_classes
    b: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    skipped: list[int] = field(default_factory=list)
    objective: float = float("nan")

    def decision(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.W.shape[0]:
            raise DimensionError(f"probe expects {self.W.shape[0]} features, got {X.shape}")
        return ((X - self.mean) / self.std) @ self.W + self.b

    def predict_proba(self, X) -> np.ndarray:
        return nc.sigmoid(self.decision(X))


def _probe_objective(Xs, Y, W, b, l2):
    n = Xs.shape[0]
    z = Xs @ W + b
    # mean logistic loss, summed over heads
    loss = np.sum(np.logaddexp(0.0, z) - Y * z) / n + 0.5 * l2 * np.sum(W * W)
    r = (nc.sigmoid(z) - Y) / n
    return float(loss), Xs.T @ r + l2 * W, r.sum(axis=0)


def train_probe(features, labels, cfg: ProbeConfig | None = None) -> LinearProbe:
    """One-vs-rest logistic regression with an L2 penalty on the weights.

    The full-batch objective is minimized by L-BFGS from a seeded random
    start.  Heads whose training labels are all one class are skipped: their
    weights stay zero and their bias is the constant log-odds.
    """
    cfg = cfg or ProbeConfig()
    cfg.validate()
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(labels, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DimensionError(f"features {X.shape} and labels {Y.shape} disagree")
    if X.shape[0] < 2:
        raise ConfigError("probe needs at least two training rows")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    Xs = (X - mean) / std
    pos = Y.sum(axis=0)
    live = (pos > 0) & (pos < Y.shape[0])
    skipped = [int(j) for j in np.flatnonzero(~live)]
    F, C = Xs.shape[1], Y.shape[1]
    W = np.zeros((F, C))
    b = np.zeros(C)
    obj = float("nan")
    k = int(live.sum())
    if k:
        Yl = Y[:, live]

        def fun(theta):
            Wl, bl_ = theta[:F * k].reshape(F, k), theta[F * k:]
            loss, gw, gb = _probe_objective(Xs, Yl, Wl, bl_, cfg.l2)
            return loss, np.concatenate([gw.ravel(), gb])

        rng = np.random.default_rng(cfg.seed)
        theta0 = np.concatenate([rng.normal(0.0, 0.01, size=F * k), np.zeros(k)])
        res = minimize(fun, theta0, jac=True, method="L-BFGS-B",
                       options={"maxiter": cfg.max_iter, "gtol": cfg.tol, "ftol": 0.0})
        W[:, live] = res.x[:F * k].reshape(F, k)
        b[live] = res.x[F * k:]
        obj = float(res.fun)
        if not (np.all(np.isfinite(res.x)) and math.isfinite(obj)):
            raise NumericError("probe training diverged")
    for j in skipped:
        p = min(max(pos[j] / Y.shape[0], 1e-6), 1 - 1e-6)
        b[j] = math.log(p / (1.0 - p))
    return LinearProbe(W, b, mean, std, skipped, obj)


# ---------------------------------------------------------------- per-session features

@dataclass
class TrainedModels:
    sae: object
    dce: dm.DceModel | None = None
    fused: dm.DceModel | None = None
    ema: bl.EmaParams | None = None
    embeddings: dict | None = None

    def session_embeddings(self, dataset) -> dict:
        if self.embeddings is None:
            self.embeddings = dm.session_embedding_lookup(dataset, self.sae)
        return self.embeddings


@dataclass
class SplitTable:
    """Row-aligned per-session features for one split; labels kept apart."""
    f: np.ndarray
    s: np.ndarray
    c_dce: np.ndarray | None
    c_fused: np.ndarray | None
    keys: list[tuple[int, int]]


def _split_table(histories, models: TrainedModels, embeddings) -> SplitTable:
    f, s, keys = [], [], []
    for h in histories:
        f.append(np.asarray(h.contexts, dtype=np.float64))
        s.append(embeddings[h.customer_id][:len(h)])
        keys.extend((h.customer_id, i) for i in range(len(h)))

    def customer_c(model):
        if model is None:
            return None
        res = dm.replay(model, histories, [embeddings[h.customer_id][:len(h)] for h in histories])
        return np.concatenate([C for C, _ in res], axis=0)

    return SplitTable(np.concatenate(f), np.concatenate(s), customer_c(models.dce),
                      customer_c(models.fused), keys)


def _scenario(table: SplitTable, parts) -> np.ndarray:
    mats = []
    for p in parts:
        m = getattr(table, p)
        if m is None:
            raise ConfigError(f"scenario needs {p!r} but the corresponding model is missing")
        mats.append(m)
    return np.hstack(mats)


def intent_matrix(histories) -> np.ndarray:
    rows = [s.intents for h in histories for s in h.sessions]
    Y = np.zeros((len(rows), len(INTENTS)), dtype=np.int64)
    for r, ints in enumerate(rows):
        Y[r, list(ints)] = 1
    return Y


def call_vector(histories) -> np.ndarray:
    return np.array([int(s.call) for h in histories for s in h.sessions], dtype=np.int64)


def fraud_vector(histories) -> np.ndarray:
    return np.array([int(s.fraud) for h in histories for s in h.sessions], dtype=np.int64)


def fit_scenario_probes(dataset, models: TrainedModels, scenarios: dict, label_fn,
                        cfg: ProbeConfig | None = None) -> dict:
    """Fit one probe per scenario from training-split sessions only."""
    emb = models.session_embeddings(dataset)
    train = dataset.train
    table = _split_table(train, models, emb)
    Y = label_fn(train)
    return {name: train_probe(_scenario(table, parts), Y, cfg) for name, parts in scenarios.items()}


def _run_task(dataset, models, scenarios, label_fn, cfg):
    probes = fit_scenario_probes(dataset, models, scenarios, label_fn, cfg)
    test = dataset.test
    table = _split_table(test, models, models.session_embeddings(dataset))
    scores = {name: probes[name].predict_proba(_scenario(table, parts))
              for name, parts in scenarios.items()}
    return scores, label_fn(test), probes


INTENT_SCENARIOS = {"Context-only": ("f",), "LSTM": ("c_fused",), "DCE": ("c_dce",),
                    "DCE+C": ("c_dce", "f")}
CALL_SCENARIOS = {"Context-only": ("f",), "s_i": ("s",), "s_i+DCE": ("s", "c_dce")}
FRAUD_SCENARIOS = {"Context-only": ("f",), "Context+DCE": ("f", "c_dce")}


def intent_task(dataset, models: TrainedModels, cfg: ProbeConfig | None = None,
                scenarios: dict | None = None) -> dict:
    """Macro AUROC over the 16 intents per feature scenario, on the test split."""
    scenarios = scenarios or {k: v for k, v in INTENT_SCENARIOS.items()
                              if models.fused is not None or k != "LSTM"}
    scores, Y, probes = _run_task(dataset, models, scenarios, intent_matrix, cfg)
    out = {}
    for name, S in scores.items():
        res = macro_auroc(S, Y)
        out[name] = res.to_dict(INTENTS) | {"n_test": int(len(Y)), "n_features": int(probes[name].W.shape[0]),
                                              "probe_skipped": [INTENTS[j] for j in probes[name].skipped]}
    return out


def call_task(dataset, models: TrainedModels, cfg: ProbeConfig | None = None) -> dict:
    scores, y, probes = _run_task(dataset, models, CALL_SCENARIOS, call_vector, cfg)
    return {name: {"auroc": auroc(S[:, 0], y), "n_test": int(len(y)), "n_positive": int(y.sum()),
                   "n_features": int(probes[name].W.shape[0])}
            for name, S in scores.items()}


def fraud_task(dataset, models: TrainedModels, rate: float = 0.05,
               cfg: ProbeConfig | None = None) -> dict:
    scores, y, probes = _run_task(dataset, models, FRAUD_SCENARIOS, fraud_vector, cfg)
    return {name: {"recall": recall_at_challenge_rate(ScoredLabels(S[:, 0], y), rate),
                   "rate": rate, "challenged": challenge_count(len(y), rate),
                   "auroc": auroc(S[:, 0], y), "n_test": int(len(y)), "n_positive": int(y.sum()),
                   "n_features": int(probes[name].W.shape[0])}
            for name, S in scores.items()}


# ---------------------------------------------------------------- next-session evaluation

def _predictions(predictor, histories, embs):
    """Per customer, predictions for sessions 2..N (row j predicts session j + 2)."""
    if isinstance(predictor, dm.DceModel):
        res = dm.replay(predictor, histories, embs)
        return [S[1:] for _, S in res]
    if isinstance(predictor, bl.EmaParams):
        return [bl.ema_all(E, predictor.alpha) for E in embs]
    if predictor == "previous":
        return [bl.previous_all(E) for E in embs]
    if predictor == "average":
        return [bl.average_all(E) for E in embs]
    if callable(predictor):
        return [np.asarray(predictor(h, E), dtype=np.float64) for h, E in zip(histories, embs)]
    raise ConfigError(f"unknown predictor {predictor!r}")


def next_session_eval(predictor, dataset, sae_model=None, embeddings: dict | None = None,
                      histories=None) -> dict:
    """Mean cosine distance between predicted and actual embeddings, sessions i >= 2.

    ``predictor`` is ``"previous"``, ``"average"``, an :class:`EmaParams`, a
    trained :class:`DceModel` or a callable ``(history, E) -> (N-1) x d``.
    """
    if embeddings is None:
        embeddings = dm.session_embedding_lookup(dataset, sae_model)
    histories = [h for h in (dataset.test if histories is None else histories) if len(h) >= 2]
    embs = [embeddings[h.customer_id][:len(h)] for h in histories]
    preds = _predictions(predictor, histories, embs)
    dists = []
    for P, E in zip(preds, embs):
        if P.shape != E[1:].shape:
            raise DimensionError(f"predictor returned {P.shape}, expected {E[1:].shape}")
        dists.append(nc.cosine_distance_value(P, E[1:]))
    d = np.concatenate(dists) if dists else np.zeros(0)
    return {"mean_cosine_distance": float(d.mean()) if d.size else float("nan"),
            "n_predictions": int(d.size), "n_customers": len(histories)}


def _including_first(model: dm.DceModel, histories, embeddings) -> dict:
    """DCE distances over every test session, i = 1 included."""
    histories = [h for h in histories if len(h)]
    embs = [embeddings[h.customer_id][:len(h)] for h in histories]
    res = dm.replay(model, histories, embs)
    d = np.concatenate([nc.cosine_distance_value(S, E) for (_, S), E in zip(res, embs)])
    return {"mean_cosine_distance_incl_first": float(d.mean()), "n_predictions_incl_first": int(d.size)}


def next_session_report(dataset, models: TrainedModels) -> dict:
    emb = models.session_embeddings(dataset)
    rows = {"previous": "previous", "average": "average"}
    if models.ema is not None:
        rows["ema"] = models.ema
    if models.fused is not None:
        rows["fused-vanilla"] = models.fused
    if models.dce is not None:
        rows["dce"] = models.dce
    out = {name: next_session_eval(p, dataset, embeddings=emb) for name, p in rows.items()}
    for name in ("fused-vanilla", "dce"):
        if name in rows:
            out[name] |= _including_first(rows[name], dataset.test, emb)
    if models.ema is not None:
        out["ema"]["alpha"] = models.ema.alpha
    return out


def probe_config_dict(cfg: ProbeConfig | None) -> dict:
    return asdict(cfg or ProbeConfig())
