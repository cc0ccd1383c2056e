import csv
import json
import subprocess
import sys

import pytest

from rfsoftmax.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from rfsoftmax.data import make_synthetic_mixture, write_dataset


def _read(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ")
    meta = json.loads(lines[0][2:])
    rows = list(csv.DictReader(lines[1:]))
    header = lines[1].split(",")
    return meta, header, rows


def _run(tmp_path, *args, name="out.csv"):
    out = tmp_path / name
    code = main([*args, "--out", str(out)])
    return code, out


def test_bench_kernel_mse(tmp_path):
    code, out = _run(tmp_path, "bench-kernel-mse", "--d", "16", "--num-rff", "10", "100", "--pairs", "50")
    assert code == EXIT_OK
    meta, header, rows = _read(out)
    assert meta["tool"] == "rfsoftmax" and meta["config"]["d"] == 16
    assert meta["backend"] in {"numba", "numpy"}
    assert header == ["method", "target", "D", "features", "seed", "mse"]
    methods = {r["method"] for r in rows}
    assert methods == {"rff", "maclaurin", "quadratic"}
    rff = {int(r["D"]): float(r["mse"]) for r in rows if r["method"] == "rff"}
    assert rff[100] < rff[10]


def test_bench_walltime(tmp_path):
    code, out = _run(tmp_path, "bench-walltime", "--scheme", "rff", "uniform", "--n", "64", "--d", "8",
                     "--num-rff", "8")
    assert code == EXIT_OK
    _, header, rows = _read(out)
    assert header[:3] == ["scheme", "n", "D"]
    assert len(rows) == 2
    assert all(float(r["mean_us"]) > 0 for r in rows)


def test_bench_walltime_rejects_small_sample_count(tmp_path):
    code, _ = _run(tmp_path, "bench-walltime", "--n", "64", "--samples", "100")
    assert code == EXIT_CONFIG


def test_bench_walltime_memory_preflight(tmp_path):
    code, _ = _run(tmp_path, "bench-walltime", "--scheme", "rff", "--n", "1048576", "--num-rff", "4096",
                   "--max-memory-gb", "0.001")
    assert code == EXIT_CONFIG


def test_bias_report(tmp_path):
    code, out = _run(tmp_path, "bias-report", "--scheme", "uniform", "exp", "--n", "8", "--d", "4", "--m", "2",
                     "--trials", "2000", "--repeats", "2")
    assert code == EXIT_OK
    _, header, rows = _read(out)
    assert "lb_term_l2" in header and "ub2" in header
    assert len(rows) == 4
    assert {r["scheme"] for r in rows} == {"uniform", "exp"}


def test_bias_report_exact_budget(tmp_path):
    code, _ = _run(tmp_path, "bias-report", "--scheme", "uniform", "--n", "200", "--m", "4", "--exact")
    assert code == EXIT_CONFIG
    code, out = _run(tmp_path, "bias-report", "--scheme", "uniform", "--n", "6", "--d", "4", "--m", "2",
                     "--exact", name="exact.csv")
    assert code == EXIT_OK
    assert float(_read(out)[2][0]["stderr_l2"]) == 0.0


def test_ratio_check(tmp_path):
    code, out = _run(tmp_path, "ratio-check", "--n", "8", "--d", "4", "--num-rff", "64", "256",
                     "--repeats", "3")
    assert code == EXIT_OK
    _, _, rows = _read(out)
    assert [r["kind"] for r in rows].count("median") == 2
    assert len(rows) == 8


def test_train_synthetic(tmp_path):
    code, out = _run(tmp_path, "train", "--synthetic", "--n", "20", "--v", "100", "--per-class", "5",
                     "--d", "8", "--m", "3", "--num-rff", "16", "--epochs", "2", "--scheme", "rff", "uniform")
    assert code == EXIT_OK
    _, header, rows = _read(out)
    assert header[:3] == ["epoch", "scheme", "seed"]
    assert "prec@1" in header
    assert len(rows) == 4
    assert all(float(r["probe_full_loss"]) > 0 for r in rows)


def test_train_from_file_and_zero_epochs(tmp_path):
    data = tmp_path / "d.txt"
    write_dataset(make_synthetic_mixture(10, 30, 4, seed=0), data)
    code, out = _run(tmp_path, "train", "--data", str(data), "--d", "4", "--m", "2", "--epochs", "0")
    assert code == EXIT_OK
    _, header, rows = _read(out)
    assert rows == [] and "probe_full_loss" in header


@pytest.mark.parametrize(
    "args",
    [
        ["train"],
        ["train", "--synthetic", "--data", "x"],
        ["train", "--synthetic", "--n", "5", "--m", "5"],
        ["train", "--synthetic", "--test-fraction", "1.5"],
        ["train", "--data", "/nonexistent/file.txt"],
        ["bias-report", "--m", "0"],
        ["bias-report", "--scheme", "nope"],
        ["ratio-check", "--softmax-temp", "-1"],
        ["bench-kernel-mse", "--num-rff", "2.5"],
    ],
)
def test_config_errors_exit_2(tmp_path, args):
    code, _ = _run(tmp_path, *args)
    assert code == EXIT_CONFIG


def test_malformed_dataset_exit_2(tmp_path):
    data = tmp_path / "bad.txt"
    data.write_text("1 10 2\n0 3:x\n")
    code, _ = _run(tmp_path, "train", "--data", str(data), "--m", "1")
    assert code == EXIT_CONFIG


def test_unwritable_output(tmp_path):
    code = main(["ratio-check", "--n", "4", "--num-rff", "8", "--out", str(tmp_path / "missing" / "x.csv")])
    assert code == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_runtime_error_exit_3(tmp_path):
    # a huge learning rate drives the loss to overflow
    code, _ = _run(tmp_path, "train", "--synthetic", "--n", "10", "--v", "50", "--per-class", "3",
                   "--d", "4", "--m", "2", "--epochs", "1", "--scheme", "full", "--lr", "1e300")
    assert code == EXIT_RUNTIME


def test_rerun_is_deterministic_except_timing(tmp_path):
    args = ["train", "--synthetic", "--n", "15", "--v", "60", "--per-class", "4", "--d", "6", "--m", "3",
            "--num-rff", "16", "--epochs", "2", "--scheme", "rff", "exp"]
    _, a = _run(tmp_path, *args, name="a.csv")
    _, b = _run(tmp_path, *args, name="b.csv")
    meta_a, _, rows_a = _read(a)
    meta_b, _, rows_b = _read(b)
    assert meta_a == meta_b
    for ra, rb in zip(rows_a, rows_b):
        ra.pop("seconds")
        rb.pop("seconds")
        assert ra == rb


def test_module_entry_point_to_stdout():
    out = subprocess.run(
        [sys.executable, "-m", "rfsoftmax", "ratio-check", "--n", "4", "--d", "3", "--num-rff", "16"],
        capture_output=True, text=True, check=True,
    ).stdout
    assert out.startswith("# {")
    assert "max_dev" in out.splitlines()[1]
