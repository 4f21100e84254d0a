"""On-disk formats: dataset files, checkpoint containers and run configs.

Dataset file: one JSON header line, then one JSON record per session sorted
by ``(customer_id, login_time)``.  Floats are written with Python's shortest
round-trip repr, so contexts reload bit-exactly.

Checkpoint: ``MAGIC`` (8 bytes), manifest length as uint64 little-endian,
UTF-8 JSON manifest, then the raw little-endian tensor payloads in manifest
order.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .baselines import EmaFitConfig, EmaParams
from .dce_model import DceConfig, DceModel
from .errors import ConfigError, DceError
from .evalkit import ProbeConfig
from .sess_ae import AutoencoderModel, SaeConfig
from .synthgen import (INTENTS, CustomerHistory, Dataset, EventVocab, GenConfig, Session,
                       build_vocab, context_offsets)

DATASET_FORMAT = "dce-dataset"
DATASET_VERSION = 1
MAGIC = b"DCECKPT1"
CHECKPOINT_VERSION = 1


class FormatError(DceError, ValueError):
    """A file does not follow the expected layout."""


# ---------------------------------------------------------------- atomic writes

@contextmanager
def atomic_open(path, mode: str = "w"):
    """Write to a sibling temp file and rename over ``path`` on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": "\n"})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    with atomic_open(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


# ---------------------------------------------------------------- dataset file

def _session_record(h: CustomerHistory, i: int, calls: list[int]) -> dict:
    s = h.sessions[i]
    return {"customer_id": int(s.customer_id), "login_time": int(s.login_time),
            "events": [[int(e), int(t)] for e, t in s.events], "intents": [int(j) for j in s.intents],
            "fraud": bool(s.fraud), "call": bool(s.call), "split": s.split,
            "context": [float(x) for x in h.contexts[i]], "calls": calls}


def _calls_by_session(h: CustomerHistory) -> list[list[int]]:
    # session i owns calls in [login_i, login_{i+1}); the first also owns earlier ones
    logins = h.login_times
    out = [[] for _ in h.sessions]
    for c in sorted(int(c) for c in h.call_times):
        out[max(int(np.searchsorted(logins, c, side="right")) - 1, 0)].append(c)
    return out


def dataset_header(ds: Dataset) -> dict:
    return {"format": DATASET_FORMAT, "version": DATASET_VERSION, "seed": ds.config.seed,
            "config": ds.config.to_dict(), "vocab": list(ds.vocab.names), "intents": list(INTENTS),
            "context_offsets": {k: list(v) for k, v in context_offsets().items()},
            "n_customers": len(ds.customers), "n_sessions": ds.n_sessions}


def save_dataset(ds: Dataset, path) -> int:
    """Write ``ds``; returns the number of session records."""
    n = 0
    with atomic_open(path) as fh:
        fh.write(json.dumps(dataset_header(ds), sort_keys=True) + "\n")
        for h in sorted(ds.customers, key=lambda h: h.customer_id):
            if len(h.sessions) and not np.all(np.diff(h.login_times) >= 0):
                raise FormatError(f"customer {h.customer_id} sessions are not time ordered")
            for i, calls in enumerate(_calls_by_session(h)):
                fh.write(json.dumps(_session_record(h, i, calls), sort_keys=True) + "\n")
                n += 1
    return n


def _history(cid: int, records: list[dict], width: int) -> CustomerHistory:
    sessions = [Session(cid, r["login_time"], [(e, t) for e, t in r["events"]], tuple(r["intents"]),
                        r["fraud"], r["call"], r["split"]) for r in records]
    ctx = np.array([r["context"] for r in records], dtype=np.float64).reshape(len(records), width)
    calls = [c for r in records for c in r["calls"]]
    return CustomerHistory(cid, sessions, ctx, calls)


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: bad header: {exc}") from exc
        if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
            raise FormatError(f"{path}: not a version {DATASET_VERSION} dataset file")
        width = header["context_offsets"]["fraud"][1] if header.get("context_offsets") else 0
        customers, cur, prev_key = [], [], None
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            key = (r["customer_id"], r["login_time"])
            if prev_key is not None and key < prev_key:
                raise FormatError(f"{path}:{lineno}: records not sorted by (customer, time)")
            if cur and r["customer_id"] != cur[-1]["customer_id"]:
                customers.append(_history(cur[-1]["customer_id"], cur, width))
                cur = []
            cur.append(r)
            prev_key = key
        if cur:
            customers.append(_history(cur[-1]["customer_id"], cur, width))
    cfg = GenConfig(**header["config"])
    vocab = EventVocab(header["vocab"])
    if len(customers) != header.get("n_customers", len(customers)):
        raise FormatError(f"{path}: header promises {header['n_customers']} customers, "
                          f"found {len(customers)}")
    return Dataset(customers, vocab, cfg)


# ---------------------------------------------------------------- checkpoints

def _to_jsonable(x):
    if isinstance(x, dict):
        return {str(k): _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_to_jsonable(v) for v in x.tolist()]
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_checkpoint(path, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    entries, payloads = [], []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "width": 8})
        payloads.append(arr.tobytes())
    manifest = _to_jsonable(dict(manifest) | {"format_version": CHECKPOINT_VERSION, "tensors": entries})
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with atomic_open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad manifest: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
    tensors, pos = {}, 16 + n
    for e in manifest["tensors"]:
        if e["name"] in tensors:
            raise FormatError(f"{path}: tensor {e['name']!r} appears twice")
        size = int(np.prod(e["shape"], dtype=np.int64)) * e["width"]
        if pos + size > len(data):
            raise FormatError(f"{path}: tensor {e['name']!r} is truncated")
        tensors[e["name"]] = np.frombuffer(data, dtype=e["dtype"], count=size // e["width"],
                                           offset=pos).reshape(e["shape"]).astype(np.float64)
        pos += size
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return manifest, tensors


def save_model(model, path) -> None:
    """Write a session autoencoder, DCE model or EMA parameters."""
    if isinstance(model, AutoencoderModel):
        manifest = {"kind": "sae", "dims": {"m": model.m, "d": model.d, "k": model.k,
                                              "k_max": model.k_max}, "config": model.config}
        write_checkpoint(path, manifest, model.params)
    elif isinstance(model, DceModel):
        manifest = {"kind": model.cfg.mode, "dims": {"d": model.d, "F": model.F},
                    "config": dataclasses.asdict(model.cfg), "ctx_mean": model.ctx_mean,
                    "ctx_std": model.ctx_std, "meta": model.meta}
        write_checkpoint(path, manifest, model.params)
    elif isinstance(model, EmaParams):
        write_checkpoint(path, {"kind": "ema", "alpha": model.alpha,
                                "train_distance": model.train_distance}, {})
    else:
        raise TypeError(f"cannot save {type(model).__name__}")


def load_model(path):
    manifest, tensors = read_checkpoint(path)
    kind = manifest.get("kind")
    if kind == "sae":
        d = manifest["dims"]
        return AutoencoderModel(tensors, d["m"], d["d"], d["k"], d["k_max"], manifest["config"])
    if kind in ("five-stream", "fused-vanilla"):
        cfg = DceConfig(**manifest["config"])
        model = DceModel(tensors, manifest["dims"]["d"], manifest["dims"]["F"], cfg,
                         np.asarray(manifest["ctx_mean"], dtype=np.float64),
                         np.asarray(manifest["ctx_std"], dtype=np.float64), manifest.get("meta", {}))
        expected = DceModel.init(model.d, model.F, cfg).params
        if set(expected) != set(tensors) or any(expected[k].shape != tensors[k].shape for k in expected):
            raise FormatError(f"{path}: tensors do not match a {kind} model of the stated dims")
        return model
    if kind == "ema":
        return EmaParams(manifest["alpha"], manifest.get("train_distance"))
    raise FormatError(f"{path}: unknown model kind {kind!r}")


# ---------------------------------------------------------------- run config

@dataclasses.dataclass
class EvalConfig:
    rate: float = 0.05


SECTIONS = {"generate": GenConfig, "sae": SaeConfig, "dce": DceConfig, "fused": DceConfig,
            "ema": EmaFitConfig, "probe": ProbeConfig, "eval": EvalConfig}


@dataclasses.dataclass
class RunConfig:
    generate: GenConfig = dataclasses.field(default_factory=GenConfig)
    sae: SaeConfig = dataclasses.field(default_factory=SaeConfig)
    dce: DceConfig = dataclasses.field(default_factory=DceConfig)
    fused: DceConfig = dataclasses.field(default_factory=lambda: DceConfig(mode="fused-vanilla"))
    ema: EmaFitConfig = dataclasses.field(default_factory=EmaFitConfig)
    probe: ProbeConfig = dataclasses.field(default_factory=ProbeConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.generate.validate()
        self.sae.validate()
        self.dce.validate()
        self.fused.validate()
        self.probe.validate()
        if self.dce.mode != "five-stream" or self.fused.mode != "fused-vanilla":
            raise ConfigError("[dce] must use mode five-stream and [fused] mode fused-vanilla")
        if not 0.0 < self.eval.rate <= 1.0:
            raise ConfigError(f"eval rate must lie in (0, 1], got {self.eval.rate}")
        if not 0.0 < self.ema.init_alpha < 1.0 or self.ema.iterations < 0 or self.ema.lr <= 0:
            raise ConfigError(f"invalid EMA fit config {self.ema}")


def _coerce(raw: str, default, where: str):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    if default is None:
        low = raw.strip().lower()
        if low in ("", "none"):
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer or none, got {raw!r}") from None
    return raw.strip()


def parse_run_config(text: str) -> RunConfig:
    """Parse an INI config; unknown sections or keys are rejected."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    rc = RunConfig()
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        obj = getattr(rc, section)
        names = {f.name for f in dataclasses.fields(obj)}
        for key, raw in cp.items(section):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(obj, key, _coerce(raw, getattr(obj, key), f"[{section}] {key}"))
    rc.validate()
    return rc


def load_run_config(path=None) -> RunConfig:
    if path is None:
        rc = RunConfig()
        rc.validate()
        return rc
    return parse_run_config(Path(path).read_text(encoding="utf-8"))


def dump_run_config(rc: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in dataclasses.asdict(getattr(rc, section)).items():
            lines.append(f"{key} = {'none' if value is None else value}")
        lines.append("")
    return "\n".join(lines)
