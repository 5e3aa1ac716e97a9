"""Command-line workflow on a tiny corpus."""
import json

import numpy as np
import pytest

from scalosiam.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, RunConfig, main
from scalosiam.evaluation import read_csv


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(root), "--clips-per-class", "3", "--seed", "1"]) == EXIT_OK
    return root


def test_synth_writes_balanced_corpus(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--clips-per-class", "20", "--seed", "0"]) == EXIT_OK
    dirs = sorted(p for p in tmp_path.iterdir() if p.is_dir())
    assert len(dirs) == 8
    assert sum(len(list(d.glob("*.wav"))) for d in dirs) == 160
    assert "160 clips" in capsys.readouterr().out


def test_synth_is_bit_identical(tmp_path):
    for name in ("a", "b"):
        main(["synth", "--out", str(tmp_path / name), "--clips-per-class", "1", "--seed", "4"])
    for f in sorted((tmp_path / "a").rglob("*.wav")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_ingest_writes_manifest(corpus, tmp_path):
    out = tmp_path / "m.json"
    assert main(["ingest", "--data", str(corpus), "--out", str(out)]) == EXIT_OK
    d = json.loads(out.read_text())
    assert d["quota"] == 3 and len(d["classes"]) == 8


def test_tfr_idempotent_and_keyed_by_kind(corpus, tmp_path, capsys):
    cache = str(tmp_path / "cache")
    args = ["tfr", "--data", str(corpus), "--cache", cache, "--image-size", "32"]
    assert main(args) == EXIT_OK
    assert "24 computed, 0 cache hits" in capsys.readouterr().out
    assert main(args) == EXIT_OK
    assert "0 computed, 24 cache hits" in capsys.readouterr().out
    assert main(args + ["--kind", "spectrogram"]) == EXIT_OK
    assert "24 computed, 0 cache hits" in capsys.readouterr().out
    index = json.loads((tmp_path / "cache" / "index.json").read_text())
    assert len(index) == 48
    assert {v["kind"] for v in index.values()} == {"scalogram", "spectrogram"}


def test_train_eval_report_model_info(corpus, tmp_path, capsys):
    cache, runs = str(tmp_path / "cache"), str(tmp_path / "runs")
    common = ["--data", str(corpus), "--cache", cache, "--runs-dir", runs, "--seed", "2"]
    assert main(["tfr", *common]) == EXIT_OK
    fast = ["--epochs", "1", "--batches-per-epoch", "1", "--batch-size", "2", "--n-train", "6"]
    assert main(["train", *common, *fast, "--name", "t"]) == EXIT_OK
    run = tmp_path / "runs" / "t"
    assert (run / "ckpt").exists() and (run / "loss.csv").exists()
    echoed = json.loads((run / "config.json").read_text())
    assert echoed["epochs"] == 1 and echoed["seed"] == 2

    assert main(["model", "info", str(run / "ckpt")]) == EXIT_OK
    assert "total parameters: 222,705" in capsys.readouterr().out

    assert main(["eval", *common, *fast, "--name", "e", "--repetitions", "1", "--trials", "20"]) == EXIT_OK
    rows = read_csv(tmp_path / "runs" / "e" / "eval.csv")
    assert [r.architecture for r in rows] == ["conv", "nearest_neighbor", "random"]
    assert all(r.max_accuracy == r.mean_accuracy for r in rows)

    png = tmp_path / "bars.png"
    assert main(["report", str(tmp_path / "runs" / "e" / "eval.csv"), "--out", str(tmp_path / "r.txt"),
                 "--plot", str(png)]) == EXIT_OK
    assert "Scalogram" in (tmp_path / "r.txt").read_text()
    assert png.exists()


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 7, "seed": 3}))
    from scalosiam.cli import build_parser, resolve_config

    args = build_parser().parse_args(["train", "--config", str(cfg), "--seed", "9"])
    rc = resolve_config(args)
    assert rc.epochs == 7 and rc.seed == 9


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing")]) == EXIT_DATA
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_field": 1}))
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["model", "info", str(tmp_path / "nope")]) == EXIT_DATA
    assert main(["eval", "--data", str(tmp_path), "--n-train", "0"]) in (EXIT_CONFIG, EXIT_DATA)


def test_desk_model_config_defaults():
    cfg = RunConfig()
    mc = cfg.model_config()
    assert mc.input_shape == (64, 64, 3) and mc.init == "he"
    assert mc.dropout_rate == 0.0 and RunConfig(scale="full").dropout == 0.2
