import json

import numpy as np
import pytest

from driftback.cli import run
from driftback.io import file_digest, load_cloud, save_cloud


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny corpus and one-epoch checkpoints, built through the CLI."""
    root = tmp_path_factory.mktemp("pipe")
    data, ckpt = root / "data", root / "ckpt"
    assert run(["gen", "--families", "3", "--per-class", "34", "--n", "32", "--out", str(data)]) == 0
    small = ["--data", str(data), "--limit", "4", "--threads", "1"]
    fast = ["--epochs", "1", "--points", "16", "--ckpt", str(ckpt)]
    assert run(["train-vae", *small, *fast, "--dz", "8"]) == 0
    assert run(["train-diffusion", *small, *fast, "--no-prior", "--local-k", "8"]) == 0
    assert run(["train-classifier", *small, *fast]) == 0
    cfg = root / "run.json"
    cfg.write_text(json.dumps({"t_w": 2, "lambda": 0.96}))
    return root, data, ckpt, cfg


def test_gen_counts_and_manifest(tmp_path):
    out = tmp_path / "d"
    assert run(["gen", "--families", "2", "--per-class", "3", "--n", "16", "--out", str(out),
                "--format", "xyz"]) == 0
    assert len(list((out / "clouds").glob("*.xyz"))) == 6
    labels = json.loads((out / "labels.json").read_text())
    assert labels["labels"] == [0, 0, 0, 1, 1, 1]
    manifest = json.loads((out / "manifest-gen.json").read_text())
    assert manifest["command"] == "gen" and manifest["seeds"] == {"corpus": 0}
    assert len(manifest["outputs"]) == 7


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run(["frobnicate"]) == 2
    assert run(["adapt", "--ckpt", "x", "--in", "y", "--out", "z"]) == 2
    assert "--config" in capsys.readouterr().err
    assert run(["gen", "--out", str(tmp_path), "--threads", "0"]) == 2
    assert run([]) == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "in"
    bad.mkdir()
    (bad / "a.xyz").write_text("0 0 0\n1 2 oops\n")
    cfg = tmp_path / "c.json"
    cfg.write_text("{}")
    assert run(["adapt", "--config", str(cfg), "--ckpt", str(tmp_path / "none"),
                "--in", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "missing checkpoint" in capsys.readouterr().err
    assert run(["eval", "--data", str(tmp_path), "--ckpt", str(tmp_path),
                "--out", str(tmp_path / "o")]) == 1


def test_bad_xyz_names_line(pipeline, tmp_path, capsys):
    _, _, ckpt, cfg = pipeline
    bad = tmp_path / "in"
    bad.mkdir()
    (bad / "a.xyz").write_text("0 0 0\n1 2 oops\n")
    assert run(["adapt", "--config", str(cfg), "--ckpt", str(ckpt), "--in", str(bad),
                "--out", str(tmp_path / "o")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_corrupt_tree(pipeline, tmp_path):
    _, data, _, _ = pipeline
    out = tmp_path / "c"
    assert run(["corrupt", "--data", str(data), "--limit", "1", "--kinds", "gauss,cut",
                "--severity", "1-2", "--out", str(out)]) == 0
    for kind in ("gauss", "cut"):
        for sev in ("1", "2"):
            assert len(list((out / kind / sev).glob("*.dpc"))) == 3
    assert run(["corrupt", "--data", str(data), "--kinds", "nope", "--out", str(out)]) == 2


def test_adapt_writes_clouds_traces_and_summary(pipeline, tmp_path):
    _, data, ckpt, cfg = pipeline
    src = tmp_path / "c"
    run(["corrupt", "--data", str(data), "--limit", "1", "--kinds", "uni", "--out", str(src)])
    out, traces = tmp_path / "adapted", tmp_path / "traces"
    assert run(["adapt", "--config", str(cfg), "--ckpt", str(ckpt), "--in", str(src),
                "--out", str(out), "--trace", str(traces), "--threads", "1"]) == 0
    files = sorted((out / "uni" / "3").glob("*.dpc"))
    assert len(files) == 3 and load_cloud(files[0]).points.shape == (32, 3)
    trace = json.loads(next((traces / "uni" / "3").glob("*.json")).read_text())
    assert [r["t"] for r in trace] == [20, 10]
    summary = json.loads((out / "summary.json").read_text())["summary"]
    assert summary["count"] == 3 and "accuracy" in summary
    manifest = json.loads((out / "manifest-adapt.json").read_text())
    assert manifest["config"]["t_w"] == 2
    for path, digest in manifest["checkpoints"].items():
        assert file_digest(path) == digest


def test_eval_report_has_all_rows(pipeline):
    root, data, ckpt, cfg = pipeline
    out = root / "eval"
    assert run(["eval", "--data", str(data), "--ckpt", str(ckpt), "--config", str(cfg),
                "--limit", "1", "--out", str(out), "--threads", "1"]) == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert len(lines) == 1 + 15 + 1 and lines[-1].startswith("mean,")
    assert (out / "report.json").exists() and (out / "manifest-eval.json").exists()


def test_analyze_ablate_bench(pipeline):
    root, data, ckpt, cfg = pipeline
    out = root / "analysis"
    assert run(["analyze", "--data", str(data), "--ckpt", str(ckpt), "--out", str(out),
                "--draws", "1", "--threads", "1"]) == 0
    assert (out / "independence.svg").read_text().startswith("<svg")
    pairs = json.loads((out / "independence.json").read_text())["pairs"]
    assert len(pairs) == 3
    assert run(["ablate", "--data", str(data), "--ckpt", str(ckpt), "--limit", "1",
                "--kinds", "uni", "--param", "t_w", "--values", "1,2", "--out", str(out)]) == 0
    assert len((out / "ablation_t_w.csv").read_text().splitlines()) == 3
    assert (out / "ablation_t_w.svg").exists()
    assert run(["bench", "--ckpt", str(ckpt), "--steps", "1,2", "--repeats", "1", "--n", "32",
                "--out", str(out)]) == 0
    timing = json.loads((out / "timing.json").read_text())
    assert timing["steps"] == [1, 2] and len(timing["ms"]) == 2


def test_training_is_reproducible_single_threaded(pipeline, tmp_path):
    _, data, _, _ = pipeline
    digests = []
    for rep in range(2):
        ckpt = tmp_path / f"ck{rep}"
        assert run(["train-vae", "--data", str(data), "--limit", "2", "--epochs", "1",
                    "--points", "16", "--dz", "8", "--ckpt", str(ckpt), "--threads", "1"]) == 0
        digests.append(file_digest(ckpt / "vae.dbt"))
    assert digests[0] == digests[1]


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("DRIFTBACK_THREADS", "1")
    out = tmp_path / "d"
    assert run(["gen", "--families", "1", "--per-class", "1", "--n", "8", "--out", str(out)]) == 0
    assert json.loads((out / "manifest-gen.json").read_text())["config"]["threads"] == 1
    monkeypatch.setenv("DRIFTBACK_THREADS", "many")
    assert run(["gen", "--families", "1", "--per-class", "1", "--n", "8", "--out", str(out)]) == 2


def test_dpc_round_trip_bytes(tmp_path):
    pts = np.random.default_rng(0).standard_normal((1024, 3))
    a, b = tmp_path / "a.dpc", tmp_path / "b.dpc"
    save_cloud(pts, a)
    save_cloud(load_cloud(a), b)
    assert a.read_bytes() == b.read_bytes()
