import json
from pathlib import Path

import pytest

from dce import cli
from dce import store

MICRO = (Path(__file__).parents[1] / "configs" / "micro.ini").read_text()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "micro.ini"
    cfg.write_text(MICRO)
    paths = {k: str(root / v) for k, v in dict(data="d.jsonl", sae="sae.ckpt", dce="dce.ckpt",
                                                 fused="fused.ckpt", ema="ema.ckpt").items()}
    paths["config"] = str(cfg)
    paths["root"] = root
    assert cli.main(["generate", "--config", str(cfg), "--seed", "5", "--out", paths["data"]]) == 0
    assert cli.main(["train", "--stage", "sae", "--data", paths["data"], "--config", str(cfg),
                     "--out", paths["sae"]]) == 0
    for stage in ("dce", "fused", "ema"):
        assert cli.main(["train", "--stage", stage, "--data", paths["data"], "--sae", paths["sae"],
                         "--config", str(cfg), "--out", paths[stage]]) == 0
    return paths


def test_generate_is_byte_identical(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[generate]\nn_customers = 20\n")
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert cli.main(["generate", "--config", str(cfg), "--seed", "7", "--out", str(a)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert cli.main(["generate", "--config", str(cfg), "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert summary["sessions"] == summary["records"] == len(a.read_text().splitlines()) - 1


def test_generate_bad_config_exit_2_no_file(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[generate]\nn_customers = 20\nwhat = 1\n")
    out = tmp_path / "x.jsonl"
    assert cli.main(["generate", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    assert cli.main(["generate", "--config", str(tmp_path / "missing.ini"), "--out", str(out)]) == 3
    assert cli.main(["generate", "--out", str(tmp_path / "no" / "dir" / "x.jsonl")]) == 3
    assert cli.main(["generate"]) == 2
    assert list(tmp_path.iterdir()) == [cfg]


def test_train_outputs_and_sidecars(run):
    for stage in ("sae", "dce", "fused"):
        side = json.loads(open(run[stage] + ".loss.json").read())
        cfg = store.load_run_config(run["config"])
        epochs = {"sae": cfg.sae.epochs, "dce": cfg.dce.epochs, "fused": cfg.fused.epochs}[stage]
        assert side["stage"] == stage and len(side["train"]) == epochs
    ema = json.loads(open(run["ema"] + ".loss.json").read())
    assert 0 < ema["alpha"] <= 1


def test_checkpoint_resave_identical(run, tmp_path):
    for stage in ("sae", "dce", "fused", "ema"):
        m = store.load_model(run[stage])
        store.save_model(m, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == open(run[stage], "rb").read()


def test_train_missing_prerequisite(run, tmp_path):
    out = str(tmp_path / "x.ckpt")
    assert cli.main(["train", "--stage", "dce", "--data", run["data"], "--out", out]) == 2
    assert cli.main(["train", "--stage", "dce", "--data", run["data"], "--sae", str(tmp_path / "nope"),
                     "--out", out]) == 2
    assert cli.main(["train", "--stage", "dce", "--data", run["data"], "--sae", run["ema"], "--out", out]) == 2
    assert cli.main(["train", "--stage", "dce", "--data", str(tmp_path / "nodata"), "--sae", run["sae"],
                     "--out", out]) == 3


def _eval(run, task, out, *extra):
    return cli.main(["eval", "--task", task, "--data", run["data"], "--sae", run["sae"], "--dce", run["dce"],
                     "--fused", run["fused"], "--ema", run["ema"], "--config", run["config"],
                     "--out", str(out), *extra])


def test_eval_next_report_rows_and_determinism(run, tmp_path):
    assert _eval(run, "next", tmp_path / "a") == 0
    assert _eval(run, "next", tmp_path / "b") == 0
    a = (tmp_path / "a.json").read_bytes()
    assert a == (tmp_path / "b.json").read_bytes()
    rep = json.loads(a)
    assert rep["order"] == ["previous", "average", "ema", "fused-vanilla", "dce"]
    assert set(rep["results"]) == set(rep["order"])
    tsv = (tmp_path / "a.tsv").read_text().splitlines()
    assert tsv[0].split("\t")[:2] == ["scenario", "mean_cosine_distance"] and len(tsv) == 6
    assert (tmp_path / "a.png").read_bytes()[:4] == b"\x89PNG"


@pytest.mark.parametrize("task,rows", [("intent", ["Context-only", "LSTM", "DCE", "DCE+C"]),
                                       ("call", ["Context-only", "s_i", "s_i+DCE"])])
def test_eval_probe_tasks(run, tmp_path, task, rows):
    assert _eval(run, task, tmp_path / task) == 0
    rep = json.loads((tmp_path / f"{task}.json").read_text())
    assert rep["order"] == rows and set(rep["results"]) == set(rows)


def test_eval_rate_validation(run, tmp_path):
    assert _eval(run, "fraud", tmp_path / "f", "--rate", "0") == 2
    assert not (tmp_path / "f.json").exists()


def test_eval_dimension_mismatch(run, tmp_path):
    from dce.sess_ae import AutoencoderModel

    other = AutoencoderModel.init(60, 5, 3)
    store.save_model(other, tmp_path / "other.ckpt")
    code = cli.main(["eval", "--task", "next", "--data", run["data"], "--sae", str(tmp_path / "other.ckpt"),
                     "--dce", run["dce"], "--out", str(tmp_path / "r")])
    assert code == 2


def test_eval_inputs_not_mutated(run, tmp_path):
    before = {k: open(run[k], "rb").read() for k in ("data", "sae", "dce")}
    assert _eval(run, "call", tmp_path / "c") == 0
    assert before == {k: open(run[k], "rb").read() for k in ("data", "sae", "dce")}


def test_numeric_failure_exit_4(run, tmp_path, monkeypatch):
    from dce.errors import NumericError

    def boom(*a, **k):
        raise NumericError("DCE loss nan at epoch 0 batch 3")

    monkeypatch.setattr(cli.dm, "train_dce", boom)
    assert cli.main(["train", "--stage", "dce", "--data", run["data"], "--sae", run["sae"],
                     "--out", str(tmp_path / "x.ckpt")]) == 4
