"""Five-stream recurrent customer embedding model.

At each login the model advances five LSTMs, one per concept:

    s : [previous session embedding, ln(1 + seconds since previous login)]
    D : day-of-week embedding
    W : week-of-month embedding
    M : month-of-year embedding
    f : standardized financial context snapshot

Each stream's hidden state goes through its own one-hidden-layer MLP; the
outputs are concatenated and mapped by a fully connected layer to the
customer embedding ``c_i``, which a second fully connected layer projects
into session-embedding space as the prediction ``s_hat_i`` of the session
about to happen.  Training minimizes cosine distance between ``s_hat_i`` and
the actual ``s_i``.

The ``fused-vanilla`` mode swaps the five streams for a single LSTM over the
concatenation of all five inputs, keeping the same heads.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .errors import AlignmentError, ConfigError, DimensionError, NumericError
from .synthgen import calendar_indices

log = logging.getLogger(__name__)

FIVE_STREAM = "five-stream"
FUSED_VANILLA = "fused-vanilla"
MODES = (FIVE_STREAM, FUSED_VANILLA)
STREAMS = ("s", "D", "W", "M", "f")
CALENDAR_SIZES = {"D": 7, "W": 5, "M": 12}
FIRST_GAP_SECONDS = 86400.0


@dataclass
class DceConfig:
    hidden: int = 32
    mlp_hidden: int = 32
    out: int = 16
    d_c: int = 32
    k_cal: int = 4
    l_max: int = 64
    epochs: int = 25
    lr: float = 3e-3
    batch_size: int = 32
    seed: int = 0
    mode: str = FIVE_STREAM
    patience: int = 4  # epochs without validation improvement; 0 disables early stopping

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.hidden, self.mlp_hidden, self.out, self.d_c, self.k_cal,
               self.l_max, self.batch_size) <= 0 or min(self.epochs, self.patience) < 0 or self.lr < 0:
            raise ConfigError(f"invalid DCE config {self}")


@dataclass
class DceModel:
    params: nc.Params
    d: int
    F: int
    cfg: DceConfig
    ctx_mean: np.ndarray
    ctx_std: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return self.cfg.mode

    @property
    def d_c(self) -> int:
        return self.cfg.d_c

    @property
    def streams(self) -> tuple[str, ...]:
        return STREAMS if self.mode == FIVE_STREAM else ("v",)

    @classmethod
    def init(cls, d: int, F: int, cfg: DceConfig | None = None,
             ctx_mean=None, ctx_std=None) -> "DceModel":
        cfg = cfg or DceConfig()
        cfg.validate()
        rng = np.random.default_rng([cfg.seed, 7])
        widths = {"s": d + 1, "D": cfg.k_cal, "W": cfg.k_cal, "M": cfg.k_cal, "f": F}
        p: nc.Params = {}
        for name, size in CALENDAR_SIZES.items():
            p[f"emb.{name}"] = rng.normal(0.0, 0.5, size=(size, cfg.k_cal))
        if cfg.mode == FIVE_STREAM:
            stream_in = widths
        else:
            stream_in = {"v": sum(widths.values())}
        for k, n_in in stream_in.items():
            p.update({f"lstm.{k}.{n}": v for n, v in nc.init_lstm(rng, n_in, cfg.hidden).items()})
            p.update({f"mlp.{k}.{n}": v for n, v in
                      nc.init_mlp(rng, cfg.hidden, cfg.mlp_hidden, cfg.out).items()})
        p["fuse.W"], p["fuse.b"] = nc.init_linear(rng, cfg.out * len(stream_in), cfg.d_c)
        p["proj.W"], p["proj.b"] = nc.init_linear(rng, cfg.d_c, d)
        ctx_mean = np.zeros(F) if ctx_mean is None else np.asarray(ctx_mean, dtype=np.float64)
        ctx_std = np.ones(F) if ctx_std is None else np.asarray(ctx_std, dtype=np.float64)
        return cls(p, d, F, cfg, ctx_mean, ctx_std)


@dataclass
class SessionStepFeatures:
    """Login-time inputs for one step; arrays may carry leading batch axes."""
    prev_session_embedding: np.ndarray
    delta_seconds: np.ndarray | float
    day_index: np.ndarray | int
    week_of_month_index: np.ndarray | int
    month_index: np.ndarray | int
    context: np.ndarray

    @property
    def log_gap(self):
        return gap_transform(self.delta_seconds)


DceState = dict  # stream name -> (h, c)


def gap_transform(delta_seconds):
    """Time-gap coordinate fed to the session stream: ``ln(1 + delta)``."""
    return np.log1p(nc.as_real(delta_seconds))


def init_state(model: DceModel, batch_shape: tuple[int, ...] = ()) -> DceState:
    h = model.cfg.hidden
    return {k: (np.zeros(batch_shape + (h,)), np.zeros(batch_shape + (h,))) for k in model.streams}


# ---------------------------------------------------------------- forward / backward

def _stream_inputs(model: DceModel, p: nc.Params, feats: SessionStepFeatures) -> dict:
    s_prev = nc.as_real(feats.prev_session_embedding)
    if s_prev.shape[-1] != model.d:
        raise DimensionError(f"session embedding width {s_prev.shape[-1]} != model d={model.d}")
    ctx = nc.as_real(feats.context)
    if ctx.shape[-1] != model.F:
        raise DimensionError(f"context width {ctx.shape[-1]} != model F={model.F}")
    ctx = (ctx - model.ctx_mean) / model.ctx_std
    gap = feats.log_gap[..., None] * np.ones(s_prev.shape[:-1] + (1,))
    x = {
        "s": np.concatenate([s_prev, gap], axis=-1),
        "D": nc.embedding_lookup(p["emb.D"], np.asarray(feats.day_index)),
        "W": nc.embedding_lookup(p["emb.W"], np.asarray(feats.week_of_month_index)),
        "M": nc.embedding_lookup(p["emb.M"], np.asarray(feats.month_index)),
        "f": ctx,
    }
    if model.mode == FUSED_VANILLA:
        return {"v": np.concatenate([x[k] for k in STREAMS], axis=-1)}
    return x


def _step_forward(model: DceModel, p: nc.Params, state: DceState, feats: SessionStepFeatures):
    x = _stream_inputs(model, p, feats)
    new_state, outs, caches = {}, [], {}
    for k in model.streams:
        h_prev, c_prev = state[k]
        h, c, lc = nc.lstm_cell_step(x[k], h_prev, c_prev,
                                     p[f"lstm.{k}.W"], p[f"lstm.{k}.U"], p[f"lstm.{k}.b"])
        o, mc = nc.mlp_forward(h, nc.subparams(p, f"mlp.{k}."))
        new_state[k] = (h, c)
        outs.append(o)
        caches[k] = (lc, mc)
    cat = np.concatenate(outs, axis=-1)
    c_emb = nc.linear_forward(cat, p["fuse.W"], p["fuse.b"])
    s_hat = nc.linear_forward(c_emb, p["proj.W"], p["proj.b"])
    return new_state, c_emb, s_hat, (feats, caches, cat, c_emb)


def _step_backward(model: DceModel, p: nc.Params, cache, ds_hat, carry: dict, grads: nc.Params):
    """Backprop one step; ``carry`` maps stream -> (dh, dc) flowing in from later steps."""
    feats, caches, cat, c_emb = cache
    dc_emb, dW, db = nc.linear_backward(ds_hat, c_emb, p["proj.W"])
    grads["proj.W"] += dW
    grads["proj.b"] += db
    dcat, dW, db = nc.linear_backward(dc_emb, cat, p["fuse.W"])
    grads["fuse.W"] += dW
    grads["fuse.b"] += db
    o = model.cfg.out
    new_carry, dx = {}, {}
    for j, k in enumerate(model.streams):
        lc, mc = caches[k]
        dh_out, g = nc.mlp_backward(dcat[..., j * o:(j + 1) * o], mc, nc.subparams(p, f"mlp.{k}."))
        nc.add_into(grads, g, f"mlp.{k}.")
        dh, dc = carry[k]
        dx[k], dh_prev, dc_prev, g = nc.lstm_cell_backward(
            dh + dh_out, dc, lc, p[f"lstm.{k}.W"], p[f"lstm.{k}.U"])
        nc.add_into(grads, g, f"lstm.{k}.")
        new_carry[k] = (dh_prev, dc_prev)
    if model.mode == FUSED_VANILLA:
        start = model.d + 1
        k_cal = model.cfg.k_cal
        for j, name in enumerate(("D", "W", "M")):
            dx[name] = dx["v"][..., start + j * k_cal:start + (j + 1) * k_cal]
    idx = {"D": feats.day_index, "W": feats.week_of_month_index, "M": feats.month_index}
    for name, size in CALENDAR_SIZES.items():
        grads[f"emb.{name}"] += nc.embedding_backward(dx[name], np.asarray(idx[name]), size)
    return new_carry


def step(model: DceModel, state: DceState, feats: SessionStepFeatures):
    """Advance every stream one login; returns ``(new_state, c_i, s_hat_i)``."""
    for k in model.streams:
        if k not in state or state[k][0].shape[-1] != model.cfg.hidden:
            raise DimensionError(f"state for stream {k!r} does not match the model")
    new_state, c_emb, s_hat, _ = _step_forward(model, model.params, state, feats)
    return new_state, c_emb, s_hat


# ---------------------------------------------------------------- sequences

def history_arrays(history, embeddings) -> dict:
    """Per-session model inputs and targets for one customer, in login order.

    The first login sees a zero previous embedding and a one-day gap.
    """
    embeddings = nc.as_real(embeddings)
    n = len(history.sessions)
    if embeddings.shape[0] != n:
        raise AlignmentError(f"{embeddings.shape[0]} embeddings for {n} sessions")
    if np.asarray(history.contexts).shape[0] != n:
        raise AlignmentError(f"{len(history.contexts)} context rows for {n} sessions")
    t = np.array([s.login_time for s in history.sessions], dtype=np.float64)
    delta = np.empty(n)
    if n:
        delta[0] = FIRST_GAP_SECONDS
        delta[1:] = np.diff(t)
    cal = np.array([calendar_indices(int(x)) for x in t], dtype=np.int64).reshape(n, 3)
    prev = np.zeros_like(embeddings)
    prev[1:] = embeddings[:-1]
    return {
        "prev": prev, "delta": delta, "D": cal[:, 0], "W": cal[:, 1], "M": cal[:, 2],
        "ctx": nc.as_real(history.contexts), "target": embeddings,
    }


def _pad(arrs: list[dict], d: int, F: int):
    B = len(arrs)
    T = max(len(a["delta"]) for a in arrs)
    out = {
        "prev": np.zeros((B, T, d)), "delta": np.full((B, T), FIRST_GAP_SECONDS),
        "D": np.zeros((B, T), dtype=np.int64), "W": np.zeros((B, T), dtype=np.int64),
        "M": np.zeros((B, T), dtype=np.int64), "ctx": np.zeros((B, T, F)),
        "target": np.zeros((B, T, d)), "mask": np.zeros((B, T)),
    }
    for r, a in enumerate(arrs):
        n = len(a["delta"])
        for key in ("prev", "delta", "D", "W", "M", "ctx", "target"):
            out[key][r, :n] = a[key]
        out["mask"][r, :n] = 1.0
    return out


def _feats_at(batch: dict, t: int) -> SessionStepFeatures:
    return SessionStepFeatures(batch["prev"][:, t], batch["delta"][:, t], batch["D"][:, t],
                               batch["W"][:, t], batch["M"][:, t], batch["ctx"][:, t])


def _batch_loss(model: DceModel, p: nc.Params, batch: dict, l_max: int):
    """Sum of masked cosine distances, prediction count and gradients of the mean.

    Histories longer than ``l_max`` are cut into windows; recurrent state
    crosses a window boundary but gradients do not.
    """
    B, T = batch["mask"].shape
    count = batch["mask"].sum()
    if count == 0:
        return 0.0, 0, nc.zeros_like_params(p)
    grads = nc.zeros_like_params(p)
    state = init_state(model, (B,))
    total = 0.0
    for w0 in range(0, T, l_max):
        caches, dists = [], []
        for t in range(w0, min(T, w0 + l_max)):
            state, _, s_hat, cache = _step_forward(model, p, state, _feats_at(batch, t))
            dist, ccache = nc.cosine_distance(s_hat, batch["target"][:, t])
            total = total + np.sum(dist * batch["mask"][:, t])
            caches.append((cache, ccache))
        h = model.cfg.hidden
        carry = {k: (np.zeros((B, h)), np.zeros((B, h))) for k in model.streams}
        for j in range(len(caches) - 1, -1, -1):
            t = w0 + j
            cache, ccache = caches[j]
            ds_hat, _ = nc.cosine_distance_backward(batch["mask"][:, t] / count, ccache)
            carry = _step_backward(model, p, cache, ds_hat, carry, grads)
    return total, int(count), grads


def batch_objective(model: DceModel, histories, embeddings_list, params: nc.Params | None = None):
    """Mean per-prediction cosine distance over ``histories`` and its gradients."""
    p = model.params if params is None else params
    batch = _pad([history_arrays(h, e) for h, e in zip(histories, embeddings_list)], model.d, model.F)
    total, count, grads = _batch_loss(model, p, batch, model.cfg.l_max)
    mean = total / max(count, 1)
    # keep extended precision when the parameters carry it (gradient checks)
    return (mean if isinstance(mean, np.longdouble) else float(mean)), grads


def unroll_loss(model: DceModel, history, session_embeddings) -> float:
    """Summed cosine distance of one customer's next-session predictions, i = 1..N."""
    arr = history_arrays(history, session_embeddings)
    state = init_state(model)
    total = 0.0
    for i in range(len(arr["delta"])):
        feats = SessionStepFeatures(arr["prev"][i], arr["delta"][i], arr["D"][i],
                                    arr["W"][i], arr["M"][i], arr["ctx"][i])
        state, _, s_hat = step(model, state, feats)
        total += float(nc.cosine_distance_value(s_hat, arr["target"][i]))
    return total


def replay(model: DceModel, histories, embeddings_list, batch_size: int = 256):
    """Run histories forward; returns per-customer ``(C, S_hat)`` arrays."""
    out = []
    for start in range(0, len(histories), batch_size):
        hs = histories[start:start + batch_size]
        es = embeddings_list[start:start + batch_size]
        arrs = [history_arrays(h, e) for h, e in zip(hs, es)]
        if not arrs:
            continue
        batch = _pad(arrs, model.d, model.F)
        B, T = batch["mask"].shape
        state = init_state(model, (B,))
        C = np.zeros((B, T, model.d_c))
        S = np.zeros((B, T, model.d))
        for t in range(T):
            state, C[:, t], S[:, t], _ = _step_forward(model, model.params, state, _feats_at(batch, t))
        for r, a in enumerate(arrs):
            n = len(a["delta"])
            out.append((C[r, :n].copy(), S[r, :n].copy()))
    return out


def context_stats(histories) -> tuple[np.ndarray, np.ndarray]:
    X = np.concatenate([np.asarray(h.contexts) for h in histories if len(h)], axis=0)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def session_embedding_lookup(dataset, sae_model) -> dict:
    """Embed every session once; returns customer id -> (N_c x d) array."""
    from .sess_ae import embed_corpus

    sessions = [s for h in dataset.customers for s in h.sessions]
    E = embed_corpus(sae_model, sessions)
    out, start = {}, 0
    for h in dataset.customers:
        out[h.customer_id] = E[start:start + len(h)]
        start += len(h)
    return out


def validation_loss(model: DceModel, histories, embeddings: dict) -> tuple[float, int]:
    """Mean distance over sessions marked ``val``, replaying each full history."""
    res = replay(model, histories, [embeddings[h.customer_id][:len(h)] for h in histories])
    dists = []
    for h, (_, S) in zip(histories, res):
        idx = [i for i, s in enumerate(h.sessions) if s.split == "val"]
        if idx:
            dists.append(nc.cosine_distance_value(S[idx], embeddings[h.customer_id][idx]))
    if not dists:
        return float("nan"), 0
    d = np.concatenate(dists)
    return float(d.mean()), int(d.size)


def train_dce(dataset, sae_model, cfg: DceConfig | None = None, embeddings: dict | None = None):
    """Self-supervised training on the training customers' training window.

    Returns ``(model, loss_history)``; the history holds the mean
    per-prediction cosine distance of every epoch.  When the dataset has
    validation sessions and ``patience > 0``, the parameters of the epoch with
    the lowest validation loss are kept and training stops after ``patience``
    epochs without improvement.
    """
    cfg = cfg or DceConfig()
    cfg.validate()
    train = [h for h in dataset.train if len(h)]
    if not train:
        raise ConfigError("no training customers in dataset")
    if embeddings is None:
        embeddings = session_embedding_lookup(dataset, sae_model)
    embs = [embeddings[h.customer_id][:len(h)] for h in train]
    mean, std = context_stats(train)
    d = embs[0].shape[1]
    model = DceModel.init(d, train[0].contexts.shape[1], cfg, mean, std)
    arrs = [history_arrays(h, e) for h, e in zip(train, embs)]
    lengths = np.array([len(a["delta"]) for a in arrs])
    val = dataset.val if cfg.patience > 0 else []
    rng = np.random.default_rng([cfg.seed, 11])
    state = nc.AdamState.zeros_like(model.params)
    history, val_history = [], []
    best = (math.inf, 0, None)
    for epoch in range(cfg.epochs):
        total = count = 0
        order = rng.permutation(len(arrs))
        chunk = cfg.batch_size * 8
        batches = []
        for s0 in range(0, len(order), chunk):
            part = order[s0:s0 + chunk]
            part = part[np.argsort(lengths[part], kind="stable")]
            batches.extend(part[i:i + cfg.batch_size] for i in range(0, len(part), cfg.batch_size))
        for bi in rng.permutation(len(batches)):
            batch = _pad([arrs[i] for i in batches[bi]], model.d, model.F)
            loss_sum, n, grads = _batch_loss(model, model.params, batch, cfg.l_max)
            if not math.isfinite(loss_sum):
                raise NumericError(f"DCE loss {loss_sum} at epoch {epoch} batch {bi}")
            nc.clip_grad_norm(grads)
            nc.adam_step(model.params, grads, state, lr=cfg.lr)
            total += loss_sum
            count += n
        history.append(float(total / count))
        if val:
            v, _ = validation_loss(model, val, embeddings)
            val_history.append(v)
            log.info("%s epoch %d loss %.5f val %.5f", cfg.mode, epoch + 1, history[-1], v)
            if v < best[0]:
                best = (v, epoch + 1, {k: p.copy() for k, p in model.params.items()})
            elif epoch + 1 - best[1] >= cfg.patience:
                break
        else:
            log.info("%s epoch %d loss %.5f", cfg.mode, epoch + 1, history[-1])
    if best[2] is not None:
        model.params = best[2]
    model.meta = {"train_customers": len(train), "config": asdict(cfg),
                  "val_history": val_history, "best_epoch": best[1] or len(history)}
    return model, history


def embed_customers(model: DceModel, dataset, sae_model=None, embeddings: dict | None = None,
                    histories=None) -> dict:
    """Replay every customer chronologically.

    Returns ``{customer_id: (C, S_hat)}`` where row i holds ``c_i`` and
    ``s_hat_i`` computed at login i from information available at that time.
    """
    histories = dataset.customers if histories is None else histories
    if embeddings is None:
        embeddings = session_embedding_lookup(dataset, sae_model)
    res = replay(model, histories, [embeddings[h.customer_id] for h in histories])
    return {h.customer_id: r for h, r in zip(histories, res)}
