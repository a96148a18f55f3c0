import json
import subprocess
import sys

import pytest

from mfgkit.cli import run
from mfgkit.config import DEFAULT_ADDITIVE_CONFIG


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_solve_happy_path(tmp_path):
    cfg = write_config(tmp_path, {"model": "toy", "beta": 0.9}, "toy.json")
    out = tmp_path / "runs" / "toy"
    assert run(["solve", "--config", cfg, "--out", str(out)]) == 0
    for name in ("flow.csv", "policy.csv", "values.csv", "solution.json", "manifest.json"):
        assert (out / name).is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "solve"
    assert all((out / f).is_file() for f in manifest["outputs"])
    assert manifest["config"] == {"model": "toy", "beta": 0.9}
    assert len(manifest["model_hash"]) == 64
    sol = json.loads((out / "solution.json").read_text())
    assert sol["converged"] and sol["residual_flow"] <= 1e-6


def test_unstable_model_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, dict(DEFAULT_ADDITIVE_CONFIG, beta=0.9))
    assert run(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "alpha*beta*gamma" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert run(["solve", "--config", "toy", "--out", str(tmp_path), "--bogus"]) == 2
    assert run(["frobnicate"]) == 2
    assert run(["solve", "--config", "toy", "--out", str(tmp_path), "--damping", "const:7"]) == 2
    assert run(["gap", "--config", "toy", "--out", str(tmp_path), "--Ns", "a,b"]) == 2
    assert run(["solve", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    assert run(["solve", "--config", write_config(tmp_path, {"model": "nope", "beta": 0.5}),
                "--out", str(tmp_path)]) == 2


def test_integrity_violation_exits_4(tmp_path):
    cfg = write_config(tmp_path, {
        "model": "tabular", "beta": 0.5, "states": [0, 1], "actions": [0],
        "kernel": [[[0.7, 0.7]], [[0.0, 1.0]]], "cost": [[0.0], [1.0]],
    })
    assert run(["constants", "--config", cfg, "--out", str(tmp_path / "o")]) == 4


def test_nonconvergence_exits_3_with_outputs(tmp_path):
    out = tmp_path / "nc"
    code = run(["solve", "--config", "toy", "--out", str(out), "--horizon", "1", "--max-iters", "1",
                "--tol-flow", "1e-14", "--tol-exploit", "1e-14"])
    assert code == 3
    assert (out / "flow.csv").is_file() and (out / "manifest.json").is_file()
    assert json.loads((out / "solution.json").read_text())["converged"] is False


def test_constants_command(tmp_path):
    out = tmp_path / "c"
    assert run(["constants", "--config", "additive", "--out", str(out)]) == 0
    data = json.loads((out / "constants.json").read_text())
    assert data["qualifier"] == "probe-based" and data["stable"]


def test_simulate_and_study(tmp_path):
    out = tmp_path / "s"
    assert run(["simulate", "--config", "toy", "--out", str(out), "--N", "20", "--reps", "5",
                "--seed", "3"]) == 0
    assert (out / "costs.csv").read_text().startswith("rep,cost\n")
    out2 = tmp_path / "st"
    assert run(["study", "--config", "toy", "--out", str(out2), "--Ns", "5,50", "--reps", "4",
                "--horizon", "10"]) == 0
    lines = (out2 / "study.csv").read_text().splitlines()
    assert lines[0] == "N,t,mean_dist,stderr" and len(lines) == 1 + 2 * 11


def test_gap_reproducible_across_workers(tmp_path, monkeypatch):
    args = ["gap", "--config", "toy", "--Ns", "10,100", "--reps", "20", "--seed", "7", "--horizon", "30"]
    assert run(args + ["--out", str(tmp_path / "a"), "--workers", "1"]) == 0
    monkeypatch.setenv("MFGKIT_WORKERS", "8")
    assert run(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("gap.csv", "gap_costs.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["workers"] == 8
    header = (tmp_path / "a" / "gap_costs.csv").read_text().splitlines()[0]
    assert header == "deviation_name,N,mean_cost,stderr"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mfgkit", "constants", "--config", "toy",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "mfgkit", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "mfgkit" in proc.stdout
