import json
from pathlib import Path

import numpy as np
import pytest

from mastervein.cli import main


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A small end-to-end pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert run("gen-corpus", "--out", str(corpus), "--ids", "4", "--samples", "4", "--seed", "3") == 0
    assert run("enroll", "--corpus", str(corpus), "--out", str(root / "enroll")) == 0
    assert (
        run(
            "calibrate",
            "--corpus", str(corpus),
            "--enroll", str(root / "enroll"),
            "--system", "miura-full",
            "--out", str(root / "calib"),
        )
        == 0
    )
    assert (
        run(
            "train-cnn",
            "--corpus", str(corpus),
            "--out", str(root / "cnn"),
            "--epochs", "2",
            "--lr", "0.02",
            "--seed", "5",
        )
        == 0
    )
    return root


def test_corpus_artifacts(workdir):
    corpus = workdir / "corpus"
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["params"]["ids"] == 4
    assert (corpus / "id000" / "enroll" / "0.pgm").exists()
    assert (corpus / "id000" / "mask.pgm").exists()


def test_gen_corpus_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for p in (a, b):
        assert run("gen-corpus", "--out", str(p), "--ids", "2", "--samples", "2", "--seed", "9") == 0
    files_a = sorted(x.relative_to(a) for x in a.rglob("*") if x.is_file())
    files_b = sorted(x.relative_to(b) for x in b.rglob("*") if x.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_calibration_artifacts(workdir):
    calib = json.loads((workdir / "calib" / "calibration.json").read_text())
    assert 0.0 <= calib["threshold"] <= 0.5
    scores = (workdir / "calib" / "scores.csv").read_text().splitlines()
    assert scores[0].startswith("probe,id000")
    assert len(scores) == 1 + 4 * 2  # header + probes


def test_attack_lve_and_eval(workdir):
    corpus = workdir / "corpus"
    lve = workdir / "lve"
    assert (
        run(
            "attack-lve",
            "--corpus", str(corpus),
            "--system", "miura-full",
            "--iters", "3",
            "--pop", "6",
            "--seed", "11",
            "--out", str(lve),
        )
        == 0
    )
    assert (lve / "master.pgm").exists() and (lve / "trace.csv").exists()
    assert (lve / "trace.png").exists()

    out = workdir / "eval_lve"
    assert (
        run(
            "eval",
            "--corpus", str(corpus),
            "--system", "miura-full",
            "--master", f"lve={lve/'master.pgm'}",
            "--seed", "1",
            "--out", str(out),
        )
        == 0
    )
    report = json.loads((out / "report.json").read_text())
    assert "lve" in report["master_fars"]


def test_attack_adv_and_combined(workdir):
    corpus = workdir / "corpus"
    model = workdir / "cnn" / "cnn.vfw1"
    probe = corpus / "id000" / "probe" / "0.pgm"
    adv = workdir / "adv"
    assert (
        run(
            "attack-adv",
            "--model", str(model),
            "--input", str(probe),
            "--iters", "3",
            "--k", "2",
            "--out", str(adv),
        )
        == 0
    )
    assert (adv / "adversarial.pgm").exists()
    manifest = json.loads((adv / "manifest.json").read_text())
    assert len(manifest["params"]["target_support"]) == 2

    combined = workdir / "combined"
    assert (
        run(
            "attack-combined",
            "--model", str(model),
            "--lve", str(workdir / "lve"),
            "--iters", "3",
            "--k", "2",
            "--out", str(combined),
        )
        == 0
    )
    assert (combined / "combined.pgm").exists()


def test_adv_zero_eps_noted_in_manifest(workdir):
    corpus = workdir / "corpus"
    model = workdir / "cnn" / "cnn.vfw1"
    probe = corpus / "id001" / "probe" / "0.pgm"
    out = workdir / "adv_eps0"
    assert (
        run(
            "attack-adv",
            "--model", str(model),
            "--input", str(probe),
            "--iters", "2",
            "--eps", "0",
            "--alpha", "0.01",
            "--k", "2",
            "--out", str(out),
        )
        == 0
    )
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["params"]["unchanged"] is True
    assert (out / "adversarial.pgm").read_bytes() == probe.read_bytes()


def test_sweep_topk(workdir):
    corpus = workdir / "corpus"
    model = workdir / "cnn" / "cnn.vfw1"
    probe = corpus / "id002" / "probe" / "1.pgm"
    out = workdir / "sweep"
    assert (
        run(
            "sweep-topk",
            "--model", str(model),
            "--corpus", str(corpus),
            "--input", str(probe),
            "--iters", "2",
            "--fractions", "0.5,0.7",
            "--out", str(out),
        )
        == 0
    )
    lines = (out / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3


def test_report_renders_table_and_figures(workdir):
    out = workdir / "report"
    assert (
        run(
            "report",
            "--eval", str(workdir / "eval_lve" / "report.json"),
            "--lve", str(workdir / "lve"),
            "--sweep", str(workdir / "sweep" / "sweep.csv"),
            "--image", f"master={workdir/'lve'/'master.pgm'}",
            "--out", str(out),
        )
        == 0
    )
    assert (out / "far_table.csv").exists()
    table = (out / "far_table.txt").read_text()
    assert "bona fide" in table and "lve" in table
    figs = out / "figures"
    assert (figs / "lve_trace.png").exists()
    assert (figs / "topk_fars.png").exists()
    assert (figs / "probes.png").exists()


def test_config_file_defaults_with_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"ids": 2, "samples": 2, "seed": 4}))
    out = tmp_path / "c1"
    assert run("--config", str(cfg), "gen-corpus", "--out", str(out)) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["params"]["ids"] == 2 and manifest["params"]["seed"] == 4
    out2 = tmp_path / "c2"
    assert run("--config", str(cfg), "gen-corpus", "--out", str(out2), "--seed", "7") == 0
    assert json.loads((out2 / "manifest.json").read_text())["params"]["seed"] == 7


def test_usage_error_exit_code_1():
    assert run("no-such-command") == 1
    assert run("gen-corpus") == 1  # missing --out


def test_runtime_error_exit_code_2(tmp_path):
    assert run("calibrate", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path / "o")) == 2
