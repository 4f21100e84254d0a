"""Sequence-to-sequence LSTM autoencoder over click-stream event ids.

The encoder's final hidden state is the session embedding.  The decoder
starts from ``(h, c) = (embedding, 0)`` and is trained with teacher forcing:
its input at position 0 is a reserved start token (row ``m`` of the token
table) and at position t the target token t-1.  Only event order enters the
model; intra-session timestamps are ignored.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, EmptyInputError, NumericError, SessionLengthError, VocabError

log = logging.getLogger(__name__)


@dataclass
class SaeConfig:
    d: int = 32
    k: int = 16
    k_max: int = 64
    epochs: int = 6
    lr: float = 5e-3
    batch_size: int = 128
    seed: int = 0
    vocab_size: int | None = None

    def validate(self) -> None:
        if min(self.d, self.k, self.k_max, self.batch_size) <= 0 or self.epochs < 0 or self.lr < 0:
            raise ConfigError(f"invalid autoencoder config {self}")


@dataclass
class AutoencoderModel:
    params: nc.Params
    m: int
    d: int
    k: int
    k_max: int
    config: dict = field(default_factory=dict)

    @property
    def start_token(self) -> int:
        return self.m

    @classmethod
    def init(cls, m: int, d: int = 32, k: int = 16, k_max: int = 64, seed: int = 0) -> "AutoencoderModel":
        rng = np.random.default_rng(seed)
        params = {"emb": rng.normal(0.0, 0.1, size=(m + 1, k))}
        for name, p in (("enc", nc.init_lstm(rng, k, d)), ("dec", nc.init_lstm(rng, k, d))):
            params.update({f"{name}.{key}": v for key, v in p.items()})
        W, b = nc.init_linear(rng, d, m)
        params["out.W"], params["out.b"] = W, b
        return cls(params, m, d, k, k_max)


def _event_ids(session) -> list[int]:
    if hasattr(session, "event_ids"):
        return session.event_ids
    return [int(e) for e in session]


def _validate_ids(model: AutoencoderModel, ids) -> None:
    if len(ids) == 0:
        raise EmptyInputError("cannot encode an empty session")
    bad = [e for e in ids if e < 0 or e >= model.m]
    if bad:
        raise VocabError(f"event id {bad[0]} outside vocabulary of size {model.m}")


def pad_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    tokens = np.zeros((len(seqs), int(lengths.max()) if len(seqs) else 0), dtype=np.int64)
    for r, s in enumerate(seqs):
        tokens[r, :len(s)] = s
    return tokens, lengths


# ---------------------------------------------------------------- encoder / decoder

def _encode_forward(p: nc.Params, tokens, lengths, d: int):
    B, T = tokens.shape
    h = np.zeros((B, d))
    c = np.zeros((B, d))
    caches = []
    for t in range(T):
        x = nc.embedding_lookup(p["emb"], tokens[:, t])
        h_new, c_new, cache = nc.lstm_cell_step(x, h, c, p["enc.W"], p["enc.U"], p["enc.b"])
        live = (t < lengths)[:, None]
        h = np.where(live, h_new, h)
        c = np.where(live, c_new, c)
        caches.append((cache, live))
    return h, caches


def _encode_backward(p: nc.Params, tokens, caches, dh, grads: nc.Params) -> None:
    dc = np.zeros_like(dh)
    m1 = p["emb"].shape[0]
    for t in range(len(caches) - 1, -1, -1):
        cache, live = caches[t]
        dx, dh_prev, dc_prev, g = nc.lstm_cell_backward(
            np.where(live, dh, 0.0), np.where(live, dc, 0.0), cache, p["enc.W"], p["enc.U"])
        dh = dh_prev + np.where(live, 0.0, dh)
        dc = dc_prev + np.where(live, 0.0, dc)
        nc.add_into(grads, g, "enc.")
        grads["emb"] += nc.embedding_backward(dx, tokens[:, t], m1)


def _decoder_inputs(tokens, start: int) -> np.ndarray:
    B = tokens.shape[0]
    return np.concatenate([np.full((B, 1), start, dtype=np.int64), tokens[:, :-1]], axis=1)


def _decode_forward(p: nc.Params, h0, dec_in):
    B, T = dec_in.shape
    h, c = h0, np.zeros_like(h0)
    hs, caches = [], []
    for t in range(T):
        x = nc.embedding_lookup(p["emb"], dec_in[:, t])
        h, c, cache = nc.lstm_cell_step(x, h, c, p["dec.W"], p["dec.U"], p["dec.b"])
        hs.append(h)
        caches.append(cache)
    H = np.stack(hs, axis=1)  # B x T x d
    logits = nc.linear_forward(H, p["out.W"], p["out.b"])
    return logits, H, caches


def _softmax_xent(logits, targets, mask):
    """Mean cross-entropy over masked positions and its gradient w.r.t. logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    n = mask.sum()
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float((nll * mask).sum() / n)
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None],
                      np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= (mask / n)[..., None]
    return loss, dlogits, logp


def batch_loss(model: AutoencoderModel, tokens, lengths, params: nc.Params | None = None):
    """Mean token cross-entropy of a padded batch and gradients for every parameter."""
    p = model.params if params is None else params
    H0, enc_caches = _encode_forward(p, tokens, lengths, model.d)
    dec_in = _decoder_inputs(tokens, model.start_token)
    logits, H, dec_caches = _decode_forward(p, H0, dec_in)
    mask = (np.arange(tokens.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
    loss, dlogits, _ = _softmax_xent(logits, tokens, mask)

    grads = nc.zeros_like_params(p)
    dH, dW, db = nc.linear_backward(dlogits, H, p["out.W"])
    grads["out.W"] += dW
    grads["out.b"] += db
    dh = np.zeros_like(H0)
    dc = np.zeros_like(H0)
    m1 = p["emb"].shape[0]
    for t in range(dec_in.shape[1] - 1, -1, -1):
        dx, dh, dc, g = nc.lstm_cell_backward(dh + dH[:, t], dc, dec_caches[t], p["dec.W"], p["dec.U"])
        nc.add_into(grads, g, "dec.")
        grads["emb"] += nc.embedding_backward(dx, dec_in[:, t], m1)
    # decoder cell state is seeded with zeros, so only dh flows into the encoder
    _encode_backward(p, tokens, enc_caches, dh, grads)
    return loss, grads


# ---------------------------------------------------------------- public ops

def encode(model: AutoencoderModel, session) -> np.ndarray:
    """Embedding of one session: final encoder hidden state from a zero start.

    Sessions longer than ``k_max`` are truncated.
    """
    ids = _event_ids(session)
    _validate_ids(model, ids)
    tokens, lengths = pad_batch([ids[:model.k_max]])
    h, _ = _encode_forward(model.params, tokens, lengths, model.d)
    return h[0]


def embed_corpus(model: AutoencoderModel, sessions, batch_size: int = 512) -> np.ndarray:
    """Encode many sessions; row i is ``encode(model, sessions[i])``."""
    seqs = []
    for i, s in enumerate(sessions):
        ids = _event_ids(s)
        try:
            _validate_ids(model, ids)
        except (EmptyInputError, VocabError) as exc:
            raise type(exc)(f"session {i}: {exc}") from exc
        seqs.append(ids[:model.k_max])
    out = np.zeros((len(seqs), model.d))
    for start in range(0, len(seqs), batch_size):
        tokens, lengths = pad_batch(seqs[start:start + batch_size])
        out[start:start + len(lengths)], _ = _encode_forward(model.params, tokens, lengths, model.d)
    return out


def reconstruct_logits(model: AutoencoderModel, embedding, target) -> np.ndarray:
    """Teacher-forced decoder scores, one row of ``m`` logits per target position."""
    ids = _event_ids(target)
    _validate_ids(model, ids)
    if len(ids) > model.k_max:
        raise SessionLengthError(f"session of length {len(ids)} exceeds k_max={model.k_max}")
    tokens = np.asarray([ids], dtype=np.int64)
    h0 = np.asarray(embedding, dtype=np.float64).reshape(1, model.d)
    logits, _, _ = _decode_forward(model.params, h0, _decoder_inputs(tokens, model.start_token))
    return logits[0]


def token_accuracy(model: AutoencoderModel, sessions) -> float:
    """Fraction of tokens whose argmax reconstruction equals the input token."""
    hit = total = 0
    for s in sessions:
        ids = _event_ids(s)[:model.k_max]
        logits = reconstruct_logits(model, encode(model, ids), ids)
        hit += int(np.sum(logits.argmax(axis=1) == np.asarray(ids)))
        total += len(ids)
    return hit / total


def _length_bucketed_batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(lengths))
    chunk = batch_size * 32
    batches = []
    for start in range(0, len(order), chunk):
        part = order[start:start + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        batches.extend(part[i:i + batch_size] for i in range(0, len(part), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def train_autoencoder(corpus, cfg: SaeConfig | None = None):
    """Fit the autoencoder by Adam on mean token cross-entropy.

    Returns ``(model, loss_history)`` with one mean loss per epoch.
    """
    cfg = cfg or SaeConfig()
    cfg.validate()
    seqs = [_event_ids(s)[:cfg.k_max] for s in corpus]
    if not seqs:
        raise ConfigError("autoencoder corpus is empty")
    if any(len(s) == 0 for s in seqs):
        raise EmptyInputError("corpus contains an empty session")
    m = cfg.vocab_size or (max(max(s) for s in seqs) + 1)
    model = AutoencoderModel.init(m, cfg.d, cfg.k, cfg.k_max, cfg.seed)
    model.config = asdict(cfg) | {"vocab_size": m}
    for s in seqs:
        _validate_ids(model, s)
    rng = np.random.default_rng([cfg.seed, 1])
    state = nc.AdamState.zeros_like(model.params)
    lengths = np.array([len(s) for s in seqs])
    history = []
    for epoch in range(cfg.epochs):
        total = weight = 0.0
        for bi, idx in enumerate(_length_bucketed_batches(lengths, cfg.batch_size, rng)):
            tokens, lens = pad_batch([seqs[i] for i in idx])
            loss, grads = batch_loss(model, tokens, lens)
            if not math.isfinite(loss):
                raise NumericError(f"autoencoder loss {loss} at epoch {epoch} batch {bi}")
            nc.clip_grad_norm(grads)
            nc.adam_step(model.params, grads, state, lr=cfg.lr)
            total += loss * lens.sum()
            weight += lens.sum()
        history.append(total / weight)
        log.info("sae epoch %d loss %.4f", epoch + 1, history[-1])
    return model, history
