import csv
import math
from pathlib import Path

import pytest

from splatsr.cli import main


def tree(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


SYNTH = ["--n-prims", "30", "--n-views", "4", "--n-test", "2", "--lr-size", "8", "--set", "sr_factor=2"]
FAST = ["--set", "sr_factor=2", "--set", "densify_every=20", "--set", "densify_from=10"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--seed", "1", "--out", str(d), *SYNTH]) == 0
    return d


def test_synth_is_deterministic(tmp_path, data):
    assert main(["synth", "--seed", "1", "--out", str(tmp_path), "--workers", "2", *SYNTH]) == 0
    assert tree(tmp_path) == tree(data)
    assert {"gt.ply", "cameras_train.txt", "cameras_test.txt", "train_lr/000.ppm", "test_hr/001.ppm"} <= set(tree(data))


def test_usage_errors(capsys):
    assert main(["train-sr", "--data", "x", "--out", "y"]) == 1
    assert "--init" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["--help"]) == 0


def test_data_errors(tmp_path, data, capsys):
    assert main(["eval", "--scene", str(tmp_path / "missing.ply"), "--data", str(data), "--out", "x.csv"]) == 2
    (tmp_path / "bad.ply").write_bytes(b"ply\nnot really\n")
    assert main(["eval", "--scene", str(tmp_path / "bad.ply"), "--data", str(data), "--out", "x.csv"]) == 2
    assert main(["synth", "--out", str(tmp_path / "o"), "--set", "dropout_p=2"]) == 2
    assert "dropout_p" in capsys.readouterr().err


def run_pipeline(out, data, workers):
    out.mkdir()
    common = ["--seed", "3", "--workers", str(workers), *FAST]
    assert main(["train-lr", "--data", str(data), "--out", str(out / "lr.ply"), "--set", "iters_lr=40", *common]) == 0
    assert main(["train-sr", "--data", str(data), "--init", str(out / "lr.ply"), "--out", str(out / "sr.ply"),
                 "--telemetry", str(out / "tel.csv"), "--set", "iters_sr=30", *common]) == 0
    assert main(["eval", "--scene", str(out / "sr.ply"), "--data", str(data), "--out", str(out / "m.csv"), *common]) == 0
    assert main(["render", "--scene", str(out / "sr.ply"), "--cameras", str(data / "cameras_test.txt"),
                 "--out", str(out / "renders"), *common]) == 0
    assert main(["trace", "--data", str(data), "--init", str(out / "lr.ply"), "--out", str(out / "trace"),
                 "--iters", "12", *common]) == 0
    return tree(out)


def test_pipeline_and_worker_determinism(tmp_path, data):
    a = run_pipeline(tmp_path / "a", data, 1)
    b = run_pipeline(tmp_path / "b", data, 2)
    assert a == b
    rows = list(csv.DictReader((tmp_path / "a" / "m.csv").open()))
    assert len(rows) == 2 and all(math.isfinite(float(r["psnr"])) and math.isfinite(float(r["ssim"])) for r in rows)
    tel = (tmp_path / "a" / "tel.csv").read_text().splitlines()
    assert tel[0] == "iter,loss_mse,arm,t,lb,grad_mean,grad_max,n_prims,psnr" and len(tel) == 31
    summary = list(csv.DictReader((tmp_path / "a" / "trace" / "summary.csv").open()))
    assert [r["arm"] for r in summary] == ["mse", "sds_vanilla", "sds_annealed"]


def test_train_sr_flags(tmp_path, data):
    common = ["--data", str(data), *FAST, "--set", "iters_sr=5"]
    assert main(["train-lr", "--data", str(data), "--out", str(tmp_path / "lr.ply"), "--set", "iters_lr=5", *FAST]) == 0
    for flags in (["--vanilla-sds"], ["--no-dropout", "--no-anneal"], ["--prior", "bicubic"]):
        assert main(["train-sr", "--init", str(tmp_path / "lr.ply"), "--out", str(tmp_path / "o.ply"), *common, *flags]) == 0
    assert main(["train-sr", "--init", str(tmp_path / "lr.ply"), "--out", str(tmp_path / "v.ply"), *common,
                 "--vanilla-sds"]) == 0
    assert main(["train-sr", "--init", str(tmp_path / "lr.ply"), "--out", str(tmp_path / "n.ply"), *common,
                 "--no-dropout", "--no-anneal"]) == 0
    assert (tmp_path / "v.ply").read_bytes() == (tmp_path / "n.ply").read_bytes()
