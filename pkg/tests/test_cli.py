import csv
import json

import pytest

from raysr.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, main


def run_pipeline(root, seed=3, epochs=2):
    r = lambda *a: main([str(x) for x in a])  # noqa: E731
    steps = [
        ("scene-gen", "--out", root / "scenes", "--n-scenes", 3, "--routes-per-scene", 8, "--route-points", 34, "--seed", seed),
        ("trace", "--scenes", root / "scenes", "--out", root / "traces", "--threads", 2),
        ("cluster", "--traces", root / "traces", "--out", root / "clusters", "--slots", 4),
        ("dataset", "--samples", root / "clusters", "--out", root / "data", "--seed", seed),
        ("train", "--dataset", root / "data", "--out", root / "m4.npz", "--scale", 4, "--epochs", epochs, "--lr", 1e-3, "--seed", seed),
        ("eval", "--dataset", root / "data", "--models", root / "m4.npz", "--scales", 2, "--out", root / "eval.csv"),
        ("ablate", "--dataset", root / "data", "--out", root / "ablation.csv", "--dims", 8, 16, "--epochs", 1, "--seed", seed),
        ("cir", "--traces", root / "traces", "--dataset", root / "data", "--model", root / "m4.npz", "--out", root / "cir"),
        ("report", "--evals", root / "eval.csv", "--out", root / "summary.csv"),
    ]
    for step in steps:
        assert r(*step) == 0, step[0]


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    run_pipeline(root)
    return root


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_eval_has_baseline_and_model_rows(pipeline_dir):
    got = rows(pipeline_dir / "eval.csv")
    by_scale = {}
    for r in got:
        by_scale.setdefault((r["scale"], r["scene"]), []).append(r["method"])
    assert by_scale[("4", "ALL")] == ["baseline", "mll"]
    assert by_scale[("2", "ALL")] == ["baseline"]


def test_seed_recorded_in_manifests(pipeline_dir):
    for sub in ("scenes", "traces", "clusters", "data"):
        assert json.loads((pipeline_dir / sub / "manifest.json").read_text())["seed"] == 3
    assert json.loads((pipeline_dir / "m4.json").read_text())["seed"] == 3
    assert len(rows(pipeline_dir / "m4.history.csv")) == 3  # initial + 2 epochs


def test_report_and_cir_outputs(pipeline_dir):
    summary = rows(pipeline_dir / "summary.csv")
    mll = [r for r in summary if r["method"] == "mll"]
    assert mll and all(r["rmse_power_change_pct"] != "" for r in mll)
    assert rows(pipeline_dir / "cir" / "taps.csv")[0].keys() == {"snapshot_index", "source", "delay_ns", "power_dbm"}
    assert all(0.0 <= float(r["match_rate"]) <= 1.0 for r in rows(pipeline_dir / "cir" / "match.csv"))


def test_rerun_is_byte_identical(pipeline_dir, tmp_path):
    run_pipeline(tmp_path)
    for name in ("eval.csv", "ablation.csv", "summary.csv", "m4.history.csv", "cir/taps.csv", "cir/match.csv"):
        assert (tmp_path / name).read_bytes() == (pipeline_dir / name).read_bytes(), name


def test_bad_scale_rejected(pipeline_dir, tmp_path):
    assert main(["train", "--dataset", str(pipeline_dir / "data"), "--out", str(tmp_path / "m.npz"), "--scale", "3"]) == EXIT_CONFIG


def test_missing_required_option():
    assert main(["trace", "--out", "x"]) == EXIT_CONFIG
    assert main(["no-such-command"]) == EXIT_CONFIG


def test_missing_artifact_is_data_error(tmp_path):
    assert main(["trace", "--scenes", str(tmp_path / "nope"), "--out", str(tmp_path / "t")]) == EXIT_DATA
    assert main(["eval", "--dataset", str(tmp_path), "--scales", "4", "--out", str(tmp_path / "e.csv")]) == EXIT_DATA


def test_divergence_exit_code(pipeline_dir, tmp_path):
    code = main(["train", "--dataset", str(pipeline_dir / "data"), "--out", str(tmp_path / "m.npz"), "--epochs", "30", "--lr", "1e200"])
    assert code == EXIT_NUMERIC


def test_config_file_and_flag_override(pipeline_dir, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[global]\nseed = 5\n\n[train]\nepochs = 1\nlr = 1e-4\nmax-dim = 16\n")
    assert main(["--config", str(cfg), "train", "--dataset", str(pipeline_dir / "data"), "--out", str(tmp_path / "a.npz")]) == 0
    doc = json.loads((tmp_path / "a.json").read_text())
    assert (doc["seed"], doc["epochs"], doc["lr"], doc["max_dim"]) == (5, 1, 1e-4, 16)
    argv = ["--config", str(cfg), "train", "--dataset", str(pipeline_dir / "data"), "--out", str(tmp_path / "b.npz"), "--epochs", "2", "--seed", "7"]
    assert main(argv) == 0
    doc = json.loads((tmp_path / "b.json").read_text())
    assert (doc["seed"], doc["epochs"], doc["max_dim"]) == (7, 2, 16)


def test_bad_config_value(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nepochs = many\n")
    assert main(["--config", str(cfg), "train", "--dataset", "d", "--out", "m.npz"]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "missing.ini"), "report", "--evals", "a", "--out", "b"]) == EXIT_CONFIG
