"""Seeded synthetic population of digital sessions and login-time context.

Each customer carries a latent intent preference, a latent financial state
that drifts between logins, a payment due day and a fraud risk level.  The
observable data are sessions of click-stream events (one short motif per
intent), a 136-wide context snapshot taken at login, intent labels, 6-hour
call flags and injected account-takeover sessions.

Every customer draws from its own RNG stream seeded by ``(seed, customer_id)``
so output does not depend on generation order.  The one population-level
step is call-rate calibration, which rescales per-session call propensities
so the marginal call rate matches the configured target.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import ConfigError

INTENTS = (
    "Credit Report",
    "Deposit",
    "Overdraft Settings",
    "Bank Transactions",
    "Account Summary",
    "Transaction Management",
    "Statements and Documents",
    "Activate",
    "Redeem with bank",
    "Non Purchase Transaction",
    "Alter Production Terms",
    "Payment",
    "Authorized User",
    "Replace Card",
    "Checks",
    "Account Update",
)
INTENT_INDEX = {name: j for j, name in enumerate(INTENTS)}
ACCOUNT_SUMMARY = INTENT_INDEX["Account Summary"]
N_INTENTS = len(INTENTS)

CONTEXT_CATEGORIES = (
    ("posted_transactions", 10),
    ("transaction_authorization", 47),
    ("account", 29),
    ("utilization", 20),
    ("payments", 12),
    ("rewards", 10),
    ("digital_messaging", 6),
    ("fraud", 2),
)
CONTEXT_DIM = sum(w for _, w in CONTEXT_CATEGORIES)


def context_offsets() -> dict[str, tuple[int, int]]:
    """Half-open ``[start, stop)`` column range of every context category."""
    out, start = {}, 0
    for name, width in CONTEXT_CATEGORIES:
        out[name] = (start, start + width)
        start += width
    return out


LOGIN, LOGOUT, NAV_HOME, NAV_SEARCH = 0, 1, 2, 3
N_GENERIC_EVENTS = 4
CALL_WINDOW = 21600
DAY = 86400

# latent financial factors
UTIL, DUE, BALANCE, SPEND, REWARDS, MESSAGES, STRESS, NEWCARD = range(8)
N_LATENT = 8
_DRIFTING = (UTIL, BALANCE, SPEND, REWARDS, MESSAGES, STRESS)

CONFUSING_INTENTS = tuple(INTENT_INDEX[n] for n in (
    "Overdraft Settings", "Non Purchase Transaction", "Alter Production Terms", "Checks"))
FRAUD_INTENTS = tuple(INTENT_INDEX[n] for n in ("Account Update", "Authorized User", "Replace Card"))

EPOCH0 = int(datetime(2021, 1, 1, tzinfo=timezone.utc).timestamp())


class EventVocab:
    """Dense id <-> name mapping over click-stream events."""

    def __init__(self, names):
        names = list(names)
        if len(set(names)) != len(names):
            raise ConfigError("event names must be unique")
        self.names = names
        self.index = {n: i for i, n in enumerate(names)}

    @property
    def size(self) -> int:
        return len(self.names)

    def __len__(self):
        return len(self.names)

    def name(self, i: int) -> str:
        return self.names[i]

    def id(self, name: str) -> int:
        return self.index[name]

    def __eq__(self, other):
        return isinstance(other, EventVocab) and self.names == other.names


def motif_sizes() -> list[int]:
    return [3 if j % 2 == 0 else 4 for j in range(N_INTENTS)]


def build_vocab() -> tuple[EventVocab, list[list[int]]]:
    """The 60-event vocabulary: 4 generic events plus one motif per intent."""
    names = ["login", "logout", "nav_home", "nav_search"]
    motifs = []
    for j, size in enumerate(motif_sizes()):
        slug = INTENTS[j].lower().replace(" ", "_")
        motifs.append(list(range(len(names), len(names) + size)))
        names.extend(f"{slug}:{s}" for s in range(size))
    return EventVocab(names), motifs


@dataclass
class Session:
    customer_id: int
    login_time: int
    events: list[tuple[int, int]]
    intents: tuple[int, ...]
    fraud: bool = False
    call: bool = False
    split: str = "train"

    @property
    def event_ids(self) -> list[int]:
        return [e for e, _ in self.events]

    @property
    def end_time(self) -> int:
        return self.events[-1][1]

    def __len__(self):
        return len(self.events)


@dataclass
class CustomerHistory:
    customer_id: int
    sessions: list[Session]
    contexts: np.ndarray
    call_times: list[int] = field(default_factory=list)

    @property
    def login_times(self) -> np.ndarray:
        return np.array([s.login_time for s in self.sessions], dtype=np.int64)

    @property
    def role(self) -> str:
        return "test" if self.sessions and self.sessions[0].split == "test" else "train"

    def __len__(self):
        return len(self.sessions)

    def head(self, n: int) -> "CustomerHistory":
        return CustomerHistory(self.customer_id, self.sessions[:n], self.contexts[:n],
                               [c for c in self.call_times
                                if n == len(self.sessions) or c < self.sessions[n].login_time])


@dataclass
class GenConfig:
    n_customers: int = 2000
    mean_sessions: float = 30.0
    sessions_dispersion: float = 3.0
    median_gap_days: float = 2.0
    gap_sigma: float = 0.9
    n_events: int = 60
    n_intents: int = 16
    fraud_rate: float = 0.01
    call_rate: float = 0.05
    test_fraction: float = 0.2
    val_time_fraction: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        for name in ("fraud_rate", "call_rate", "test_fraction", "val_time_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.fraud_rate >= 1.0:
            raise ConfigError("fraud_rate must be < 1")
        if self.n_customers < 0:
            raise ConfigError("n_customers must be >= 0")
        if self.mean_sessions < 1 or self.sessions_dispersion <= 0:
            raise ConfigError("session count distribution parameters invalid")
        if self.median_gap_days <= 0 or self.gap_sigma <= 0:
            raise ConfigError("gap distribution parameters must be positive")
        if self.n_intents != N_INTENTS:
            raise ConfigError(f"n_intents is fixed at {N_INTENTS}")
        if self.n_events != N_GENERIC_EVENTS + sum(motif_sizes()):
            raise ConfigError(f"n_events is fixed at {N_GENERIC_EVENTS + sum(motif_sizes())} "
                              "by the intent motifs")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    customers: list[CustomerHistory]
    vocab: EventVocab
    config: GenConfig

    def by_role(self, role: str) -> list[CustomerHistory]:
        return [h for h in self.customers if h.role == role]

    @property
    def train(self) -> list[CustomerHistory]:
        """Training customers cut at their train/val time boundary."""
        out = []
        for h in self.by_role("train"):
            n = sum(s.split == "train" for s in h.sessions)
            out.append(h.head(n))
        return out

    @property
    def val(self) -> list[CustomerHistory]:
        """Training customers whose later time window holds validation sessions."""
        return [h for h in self.by_role("train") if any(s.split == "val" for s in h.sessions)]

    @property
    def test(self) -> list[CustomerHistory]:
        return self.by_role("test")

    def sessions(self):
        for h in self.customers:
            yield from h.sessions

    @property
    def n_sessions(self) -> int:
        return sum(len(h) for h in self.customers)


def calendar_indices(t: int) -> tuple[int, int, int]:
    """(day of week 0-6 from Monday, week of month 0-4, month 0-11) in UTC."""
    d = datetime.fromtimestamp(int(t), tz=timezone.utc)
    return d.weekday(), (d.day - 1) // 7, d.month - 1


def label_intents(events, latent_intents) -> tuple[int, ...]:
    """The session's intent set; sessions with no clear intent are Account Summary."""
    chosen = sorted(set(int(j) for j in latent_intents))
    return tuple(chosen) if chosen else (ACCOUNT_SUMMARY,)


def attach_call_labels(histories, window_seconds: int = CALL_WINDOW):
    """Flag each session iff a call lands in ``(end, end + window]``."""
    for h in histories:
        calls = np.sort(np.asarray(h.call_times, dtype=np.int64))
        for s in h.sessions:
            end = s.end_time
            lo = np.searchsorted(calls, end, side="right")
            hi = np.searchsorted(calls, end + window_seconds, side="right")
            s.call = bool(hi > lo)
    return histories


# ---------------------------------------------------------------- generator internals

_BASE_LOGIT = np.full(N_INTENTS, -3.2)
_BASE_LOGIT[ACCOUNT_SUMMARY] = -1.6

# rows: intent, columns: latent factor
_INTENT_LOADINGS = np.zeros((N_INTENTS, N_LATENT))
for _name, _factor, _w in (
    ("Payment", DUE, 2.6), ("Payment", UTIL, 0.8),
    ("Credit Report", STRESS, 0.9),
    ("Deposit", BALANCE, 1.0),
    ("Overdraft Settings", STRESS, 1.3),
    ("Bank Transactions", SPEND, 1.0),
    ("Transaction Management", SPEND, 0.9),
    ("Activate", NEWCARD, 3.5),
    ("Replace Card", NEWCARD, 1.2),
    ("Redeem with bank", REWARDS, 1.3),
    ("Non Purchase Transaction", BALANCE, 0.7),
    ("Alter Production Terms", UTIL, 0.9),
    ("Checks", BALANCE, 0.6),
    ("Account Update", MESSAGES, 1.2),
    ("Authorized User", MESSAGES, 0.6),
):
    _INTENT_LOADINGS[INTENT_INDEX[_name], _factor] = _w

_DOW_EFFECT = np.zeros((7, N_INTENTS))
_DOW_EFFECT[4, INTENT_INDEX["Deposit"]] = 1.4
_DOW_EFFECT[5:, INTENT_INDEX["Credit Report"]] = 1.2
_DOW_EFFECT[0, INTENT_INDEX["Bank Transactions"]] = 0.9
_WOM_EFFECT = np.zeros((5, N_INTENTS))
_WOM_EFFECT[0, INTENT_INDEX["Statements and Documents"]] = 2.0
_WOM_EFFECT[4, INTENT_INDEX["Statements and Documents"]] = 0.8
_MONTH_EFFECT = np.zeros((12, N_INTENTS))
_MONTH_EFFECT[[11, 0], INTENT_INDEX["Redeem with bank"]] = 1.5
_MONTH_EFFECT[3, INTENT_INDEX["Checks"]] = 1.5
_MONTH_EFFECT[[1, 2], INTENT_INDEX["Credit Report"]] = 0.8
_WEEKDAY_ACCEPT = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 0.55, 0.55])

_PERSISTENCE = 1.6
_PERSISTENCE_DAYS = 3.0
_DRIFT_DAYS = 20.0
_PREF_SCALE = 1.3
_RISK_SIGMA = 0.75


def _context_design(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Population-wide readout matrix (136 x latent), feature scales and offsets."""
    groups = {
        "posted_transactions": (SPEND, BALANCE),
        "transaction_authorization": (SPEND, STRESS),
        "account": (DUE, BALANCE, NEWCARD),
        "utilization": (UTIL, STRESS),
        "payments": (DUE, UTIL),
        "rewards": (REWARDS,),
        "digital_messaging": (MESSAGES,),
        "fraud": (),
    }
    A = np.zeros((CONTEXT_DIM, N_LATENT + 1))  # last column: customer fraud risk
    for name, (start, stop) in context_offsets().items():
        factors = groups[name]
        for j in range(start, stop):
            if name == "fraud":
                A[j, N_LATENT] = 1.0
                continue
            # a third of the authorization columns are pure noise
            if name == "transaction_authorization" and rng.random() < 0.33:
                continue
            k = factors[(j - start) % len(factors)]
            A[j, k] = rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.2)
    scales = np.exp(rng.uniform(np.log(0.01), np.log(1000.0), size=CONTEXT_DIM))
    offsets = rng.normal(0.0, 3.0, size=CONTEXT_DIM) * scales
    return A, scales, offsets


def _sample_session_count(cfg: GenConfig, rng: np.random.Generator) -> int:
    n = cfg.sessions_dispersion
    mean_extra = max(cfg.mean_sessions - 1.0, 1e-9)
    p = n / (n + mean_extra)
    return 1 + int(rng.negative_binomial(n, p))


def _login_times(cfg: GenConfig, rng: np.random.Generator, n: int) -> list[int]:
    t = EPOCH0 + int(rng.uniform(0, 365) * DAY) + int(rng.uniform(7, 22) * 3600)
    times = []
    mu = math.log(cfg.median_gap_days * DAY)
    while len(times) < n:
        if times:
            t += max(3600, int(rng.lognormal(mu, cfg.gap_sigma)))
        dow = datetime.fromtimestamp(t, tz=timezone.utc).weekday()
        if times and rng.random() > _WEEKDAY_ACCEPT[dow]:
            continue
        times.append(t)
    return times


def _due_proximity(t: int, due_day: int) -> float:
    d = datetime.fromtimestamp(t, tz=timezone.utc)
    days = (due_day - d.day) % 30
    return math.exp(-days / 4.0)


def _emit_events(rng: np.random.Generator, login: int, intents, motifs) -> list[tuple[int, int]]:
    ids = [LOGIN]
    order = list(intents)
    rng.shuffle(order)
    for j in order:
        if rng.random() < 0.3:
            ids.append(NAV_HOME)
        motif = motifs[j]
        k = 0
        # first-order chain along the motif: advance, occasionally repeat a step
        while k < len(motif):
            ids.append(motif[k])
            if rng.random() < 0.12:
                continue
            k += 1
    ids.append(LOGOUT)
    return _stamp(rng, login, ids, lo=5, hi=90)


def _emit_fraud_events(rng: np.random.Generator, login: int, motifs) -> list[tuple[int, int]]:
    au, user, card = (motifs[j] for j in FRAUD_INTENTS)
    ids = [LOGIN, NAV_SEARCH, au[0], au[1], NAV_SEARCH, *user[:2], au[2], *card, NAV_SEARCH]
    if rng.random() < 0.5:
        ids.extend(user[2:])
    ids.append(LOGOUT)
    return _stamp(rng, login, ids, lo=2, hi=12)


def _stamp(rng, login, ids, lo, hi):
    out, t = [], login
    for k, e in enumerate(ids):
        if k:
            t += int(rng.integers(lo, hi))
        out.append((e, t))
    return out


@dataclass
class _Draft:
    history: CustomerHistory
    call_weight: np.ndarray
    call_u: np.ndarray
    call_delay: np.ndarray
    late_calls: list[int]


def _generate_customer(cfg: GenConfig, cid: int, design, motifs) -> _Draft:
    rng = np.random.default_rng([cfg.seed, cid])
    A, scales, offsets = design
    n_legit = _sample_session_count(cfg, rng)
    times = _login_times(cfg, rng, n_legit)

    pref = rng.normal(0.0, _PREF_SCALE, size=N_INTENTS)
    mean_state = rng.normal(0.0, 0.7, size=N_LATENT)
    due_day = int(rng.integers(1, 29))
    log_risk = rng.normal(0.0, _RISK_SIGMA)
    risk = math.exp(log_risk)
    call_trait = float(np.mean(pref[list(CONFUSING_INTENTS)])) + rng.normal(0.0, 0.5)
    static_ctx = rng.normal(0.0, 0.6, size=CONTEXT_DIM)
    q_fraud = cfg.fraud_rate / (1.0 - cfg.fraud_rate) * risk / math.exp(_RISK_SIGMA ** 2 / 2)

    z = mean_state + rng.normal(0.0, 0.7, size=N_LATENT)
    z[NEWCARD] = 0.0
    prev_intents = np.zeros(N_INTENTS)
    prev_t = None
    sessions, latents, weights = [], [], []
    for k, t in enumerate(times):
        if prev_t is not None:
            gap_days = (t - prev_t) / DAY
            rho = math.exp(-gap_days / _DRIFT_DAYS)
            drift = rng.normal(0.0, 1.0, size=N_LATENT)
            for f in _DRIFTING:
                z[f] = mean_state[f] + rho * (z[f] - mean_state[f]) + math.sqrt(1 - rho * rho) * 0.8 * drift[f]
            z[NEWCARD] *= math.exp(-gap_days / 10.0)
            decay = math.exp(-gap_days / _PERSISTENCE_DAYS)
        else:
            decay = 0.0
        if rng.random() < 0.04:
            z[NEWCARD] = 1.5
        z[DUE] = _due_proximity(t, due_day) * 1.5
        dow, wom, month = calendar_indices(t)
        logits = (_BASE_LOGIT + pref + _INTENT_LOADINGS @ z + _DOW_EFFECT[dow]
                  + _WOM_EFFECT[wom] + _MONTH_EFFECT[month] + _PERSISTENCE * decay * prev_intents)
        latent = np.nonzero(rng.random(N_INTENTS) < 1.0 / (1.0 + np.exp(-logits)))[0]
        intents = label_intents(None, latent)
        events = _emit_events(rng, t, intents, motifs)
        sessions.append(Session(cid, t, events, intents))
        latents.append(np.append(z.copy(), log_risk))
        n_conf = sum(j in intents for j in CONFUSING_INTENTS)
        weights.append(math.exp(1.4 * n_conf + 0.7 * call_trait + 0.5 * z[STRESS]))
        prev_intents = np.zeros(N_INTENTS)
        prev_intents[list(intents)] = 1.0
        prev_t = t

        # account takeover shortly after a genuine session
        nxt = times[k + 1] if k + 1 < len(times) else None
        if rng.random() < q_fraud:
            login = events[-1][1] + max(60, int(rng.lognormal(math.log(1200), 0.8)))
            fevents = _emit_fraud_events(rng, login, motifs)
            if nxt is None or fevents[-1][1] < nxt:
                sessions.append(Session(cid, login, fevents, FRAUD_INTENTS, fraud=True))
                latents.append(np.append(z.copy(), log_risk))
                weights.append(0.0)

    L = np.array(latents)
    noise = rng.normal(0.0, 0.5, size=(len(sessions), CONTEXT_DIM))
    ctx = offsets + scales * (L @ A.T + static_ctx + noise)
    ctx = np.round(ctx, 4)

    n = len(sessions)
    late = []
    for s in sessions:
        if not s.fraud and rng.random() < 0.01:
            late.append(s.end_time + int(rng.uniform(7 * 3600, 30 * 3600)))
    return _Draft(CustomerHistory(cid, sessions, ctx), np.array(weights),
                  rng.random(n), rng.integers(120, CALL_WINDOW - 120, size=n), late)


def _calibrate_scale(w: np.ndarray, rate: float) -> float:
    """Solve ``mean(min(1, scale * w)) = rate`` for ``scale`` by bisection."""
    lo, hi = 0.0, 1.0
    while np.minimum(1.0, hi * w).mean() < rate and hi < 1e12:
        hi *= 2.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.minimum(1.0, mid * w).mean() < rate:
            lo = mid
        else:
            hi = mid
    return hi


def generate_population(cfg: GenConfig) -> Dataset:
    cfg.validate()
    vocab, motifs = build_vocab()
    design = _context_design(np.random.default_rng([cfg.seed, 2 ** 32]))
    drafts = [_generate_customer(cfg, cid, design, motifs) for cid in range(cfg.n_customers)]

    # calibrate call propensity so the marginal positive rate hits cfg.call_rate
    all_w = np.concatenate([d.call_weight for d in drafts]) if drafts else np.zeros(0)
    legit = all_w > 0
    scale = _calibrate_scale(all_w[legit], cfg.call_rate) if legit.any() else 0.0
    for d in drafts:
        p = np.minimum(1.0, scale * d.call_weight)
        calls = [s.end_time + int(delay) for s, u, delay, pk
                 in zip(d.history.sessions, d.call_u, d.call_delay, p) if u < pk]
        d.history.call_times = sorted(calls + d.late_calls)
    histories = [d.history for d in drafts]
    attach_call_labels(histories)

    split_rng = np.random.default_rng([cfg.seed, 2 ** 32 + 1])
    is_test = split_rng.random(cfg.n_customers) < cfg.test_fraction
    for h, test in zip(histories, is_test):
        if test:
            for s in h.sessions:
                s.split = "test"
            continue
        t = h.login_times
        cutoff = t[0] + (1.0 - cfg.val_time_fraction) * (t[-1] - t[0])
        for s in h.sessions:
            s.split = "val" if len(h) > 1 and s.login_time > cutoff else "train"
    return Dataset(histories, vocab, cfg)


def summarize(ds: Dataset) -> dict:
    sessions = list(ds.sessions())
    n = len(sessions)
    return {
        "customers": len(ds.customers),
        "sessions": n,
        "events": sum(len(s) for s in sessions),
        "fraud_rate": sum(s.fraud for s in sessions) / n if n else 0.0,
        "call_rate": sum(s.call for s in sessions) / n if n else 0.0,
        "splits": {k: sum(s.split == k for s in sessions) for k in ("train", "val", "test")},
    }
