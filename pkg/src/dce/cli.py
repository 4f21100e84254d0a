"""Command-line entry point: ``dce generate | train | eval``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numeric failure.  ``DCE_LOG_LEVEL`` sets log verbosity (default WARNING).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import baselines as bl
from . import dce_model as dm
from . import evalkit as ek
from . import store
from .errors import ConfigError, DimensionError, NumericError
from .sess_ae import AutoencoderModel, train_autoencoder
from .synthgen import CONTEXT_DIM, generate_population, summarize

log = logging.getLogger("dce")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dce", description="Dynamic customer embeddings toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    g.add_argument("--config", help="INI run config")
    g.add_argument("--seed", type=int, help="overrides [generate] seed")
    g.add_argument("--customers", type=int, help="overrides [generate] n_customers")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model stage")
    t.add_argument("--stage", required=True, choices=("sae", "dce", "fused", "ema"))
    t.add_argument("--data", required=True)
    t.add_argument("--sae", help="session autoencoder checkpoint (dce, fused, ema)")
    t.add_argument("--config")
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate models on the test split")
    e.add_argument("--task", required=True, choices=("next", "intent", "call", "fraud"))
    e.add_argument("--data", required=True)
    e.add_argument("--sae", required=True)
    e.add_argument("--dce")
    e.add_argument("--fused")
    e.add_argument("--ema")
    e.add_argument("--rate", type=float, help="challenge rate for --task fraud")
    e.add_argument("--config")
    e.add_argument("--out", required=True, help="report path prefix; writes .json, .tsv and .png")
    return p


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    rc = store.load_run_config(args.config)
    if args.seed is not None:
        rc.generate.seed = args.seed
    if args.customers is not None:
        rc.generate.n_customers = args.customers
    rc.generate.validate()
    ds = generate_population(rc.generate)
    n = store.save_dataset(ds, args.out)
    summary = summarize(ds) | {"records": n}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- train

def _load(path, kind, what):
    if not path:
        raise UsageError(f"{what} checkpoint is required")
    if not Path(path).exists():
        raise UsageError(f"{what} checkpoint {path} does not exist")
    model = store.load_model(path)
    if not isinstance(model, kind):
        raise UsageError(f"{path} is not a {what} checkpoint")
    return model


def _check_sae(sae: AutoencoderModel, ds) -> None:
    if sae.m != ds.vocab.size:
        raise DimensionError(f"autoencoder vocabulary {sae.m} != dataset vocabulary {ds.vocab.size}")


def _check_dce(model: dm.DceModel, sae: AutoencoderModel, ds, what: str) -> None:
    width = ds.customers[0].contexts.shape[1] if ds.customers else CONTEXT_DIM
    if model.d != sae.d:
        raise DimensionError(f"{what} expects session embeddings of width {model.d}, "
                             f"autoencoder produces {sae.d}")
    if model.F != width:
        raise DimensionError(f"{what} expects {model.F} context features, dataset has {width}")


def _sidecar(out: str, payload: dict) -> None:
    from .plotting import loss_curve

    store.write_json(f"{out}.loss.json", payload)
    series = {k: payload[k] for k in ("train", "val") if payload.get(k)}
    if series:
        loss_curve(series, f"{payload['stage']} training loss", f"{out}.loss.png")


def cmd_train(args) -> int:
    rc = store.load_run_config(args.config)
    ds = store.load_dataset(args.data)
    if args.stage == "sae":
        cfg = rc.sae
        if cfg.vocab_size is None:
            cfg.vocab_size = ds.vocab.size
        corpus = [s for h in ds.train for s in h.sessions]
        model, hist = train_autoencoder(corpus, cfg)
        store.save_model(model, args.out)
        _sidecar(args.out, {"stage": "sae", "train": hist})
        return EXIT_OK
    sae = _load(args.sae, AutoencoderModel, "session autoencoder")
    _check_sae(sae, ds)
    emb = dm.session_embedding_lookup(ds, sae)
    if args.stage == "ema":
        params = bl.fit_ema_alpha([emb[h.customer_id][:len(h)] for h in ds.train], rc.ema)
        store.save_model(params, args.out)
        _sidecar(args.out, {"stage": "ema", "alpha": params.alpha,
                            "train_distance": params.train_distance})
        return EXIT_OK
    cfg = rc.dce if args.stage == "dce" else rc.fused
    model, hist = dm.train_dce(ds, sae, cfg, embeddings=emb)
    store.save_model(model, args.out)
    _sidecar(args.out, {"stage": args.stage, "train": hist, "val": model.meta["val_history"],
                        "best_epoch": model.meta["best_epoch"]})
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _rows_for_task(task, ds, models, rc):
    """Report rows ``[(scenario, {metric: value})]`` and the headline metric name."""
    if task == "next":
        res = ek.next_session_report(ds, models)
        return res, "mean_cosine_distance"
    if task == "intent":
        return ek.intent_task(ds, models, rc.probe), "macro_auroc"
    if task == "call":
        return ek.call_task(ds, models, rc.probe), "auroc"
    return ek.fraud_task(ds, models, rc.eval.rate, rc.probe), "recall"


def _tsv(results: dict, metric: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    extra = sorted({k for r in results.values() for k, v in r.items()
                    if k != metric and isinstance(v, (int, float))})
    w.writerow(["scenario", metric, *extra])
    for name, r in results.items():
        w.writerow([name, f"{r[metric]:.6f}", *[r.get(k, "") for k in extra]])
    return buf.getvalue()


def cmd_eval(args) -> int:
    rc = store.load_run_config(args.config)
    if args.rate is not None:
        rc.eval.rate = args.rate
    if not 0.0 < rc.eval.rate <= 1.0:
        raise ConfigError(f"challenge rate must lie in (0, 1], got {rc.eval.rate}")
    ds = store.load_dataset(args.data)
    sae = _load(args.sae, AutoencoderModel, "session autoencoder")
    _check_sae(sae, ds)
    dce = _load(args.dce, dm.DceModel, "five-stream DCE") if args.dce else None
    fused = _load(args.fused, dm.DceModel, "fused-vanilla") if args.fused else None
    ema = _load(args.ema, bl.EmaParams, "EMA") if args.ema else None
    for model, what in ((dce, "five-stream DCE"), (fused, "fused-vanilla")):
        if model is not None:
            _check_dce(model, sae, ds, what)
    if args.task in ("call", "fraud") and dce is None:
        raise UsageError(f"--task {args.task} needs --dce")
    if args.task == "intent" and dce is None:
        raise UsageError("--task intent needs --dce (and optionally --fused)")
    models = ek.TrainedModels(sae, dce, fused, ema)
    results, metric = _rows_for_task(args.task, ds, models, rc)
    report = {"task": args.task, "metric": metric, "results": results, "order": list(results),
              "probe": ek.probe_config_dict(rc.probe) if args.task != "next" else None,
              "data": {"seed": ds.config.seed, "n_customers": len(ds.customers),
                       "n_sessions": ds.n_sessions, "n_test_customers": len(ds.test)}}
    if args.task == "fraud":
        report["rate"] = rc.eval.rate
    store.write_json(f"{args.out}.json", report)
    table = _tsv(results, metric)
    with store.atomic_open(f"{args.out}.tsv") as fh:
        fh.write(table)
    from .plotting import bar_chart

    bar_chart({k: v[metric] for k, v in results.items()}, f"{args.task}: {metric}", metric,
              f"{args.out}.png", lower_is_better=(args.task == "next"))
    sys.stdout.write(table)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DCE_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DimensionError, store.FormatError) as exc:
        print(f"dce: error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, store.FormatError) else EXIT_USAGE
    except NumericError as exc:
        print(f"dce: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as exc:
        print(f"dce: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
