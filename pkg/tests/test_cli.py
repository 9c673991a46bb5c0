import json
from pathlib import Path

import numpy as np
import pytest

from delayhjb.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _failing_spec(tmp_path):
    cfg = json.loads((CONFIGS / "kalman.json").read_text())
    cfg["a0"] = [[0.0, 0.0], [0.0, 0.0]]
    cfg["b0"] = [[0.0], [1.0]]
    cfg["delay"] = {}
    path = tmp_path / "failing.json"
    path.write_text(json.dumps(cfg))
    return path


def _read(path):
    return json.loads(Path(path).read_text())


def test_check_scalar(tmp_path):
    assert main(["check", "--spec", str(CONFIGS / "scalar.json"), "--out", str(tmp_path)]) == 0
    rep = _read(tmp_path / "check.json")
    assert rep["report"]["controllable"] and rep["report"]["kalman_exponent"] == 0
    assert len(rep["config_hash"]) == 64
    assert set(rep["versions"]) == {"delayhjb", "numpy", "scipy"}


def test_check_strict_exit_code(tmp_path):
    spec = _failing_spec(tmp_path)
    assert main(["check", "--spec", str(spec), "--out", str(tmp_path)]) == 0
    assert main(["check", "--spec", str(spec), "--out", str(tmp_path), "--strict"]) == 3


def test_demo_reference(tmp_path):
    assert main(["check", "--spec", "demo:pointwise", "--out", str(tmp_path)]) == 0
    assert main(["check", "--spec", "demo:nope", "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("argv", [
    ["solve", "--spec", "missing.json"],
    ["solve", "--spec", str(CONFIGS / "scalar.json"), "--grid", "foo=1"],
    ["solve", "--spec", str(CONFIGS / "scalar.json"), "--grid", "nx=abc"],
    ["solve", "--spec", str(CONFIGS / "scalar.json"), "--quad", "degree=3"],
    ["simulate", "--spec", str(CONFIGS / "scalar.json"), "--policy", "magic"],
    ["frobnicate"],
])
def test_config_errors(tmp_path, capsys, argv):
    assert main(argv + (["--out", str(tmp_path)] if len(argv) > 1 else [])) == 2
    err = capsys.readouterr().err
    if len(argv) > 1:
        assert json.loads(err.strip().splitlines()[-1])["error"] == "config"


def test_invalid_json_spec(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["check", "--spec", str(bad), "--out", str(tmp_path)]) == 2


def test_numeric_error_exit(tmp_path, capsys):
    assert main(["sweep", "--spec", str(_failing_spec(tmp_path)), "--out", str(tmp_path)]) == 4
    diag = json.loads(capsys.readouterr().err.strip())
    assert diag["error"] == "numeric" and diag["module"] == "gaussian"


def test_solve_and_evaluate_closed_form(tmp_path):
    out = tmp_path / "cf"
    spec = str(CONFIGS / "closed_form.json")
    assert main(["solve", "--spec", spec, "--out", str(out), "--grid", "nx=121,nt=16"]) == 0
    assert (out / "field.json").exists() and (out / "field.csv").exists()
    assert _read(out / "solve_report.json")["report"]["converged"]
    probes = tmp_path / "probes.json"
    probes.write_text(json.dumps([{"t": 0.0, "x0": [0.3], "history": {"constant": [0.5]}},
                                  {"t": 0.5, "x0": [-0.4], "history": {"constant": [0.0]}}]))
    assert main(["evaluate", "--spec", spec, "--field", str(out / "field"),
                 "--probes", str(probes), "--out", str(out)]) == 0
    res = _read(out / "evaluate.json")["probes"]
    # constant history 0.5 on a unit density over [-0.5, 0] adds 0.0625 to the reduced point
    assert res[0]["v"] == pytest.approx(0.3625 ** 2 + 1.0, abs=1e-6)
    assert res[1]["v"] == pytest.approx(0.16 + 0.5, abs=1e-6)


def test_byte_identical_outputs(tmp_path):
    argv = ["simulate", "--spec", str(CONFIGS / "scalar.json"), "--policy", "constant:0.5",
            "--paths", "200", "--dt", "0.01", "--format", "csv"]
    assert main(argv + ["--seed", "9", "--out", str(tmp_path / "a")]) == 0
    assert main(argv + ["--seed", "9", "--out", str(tmp_path / "b")]) == 0
    for name in ("simulate.json", "path_costs.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert main(argv + ["--seed", "10", "--out", str(tmp_path / "c")]) == 0
    assert _read(tmp_path / "c" / "simulate.json")["config_hash"] != \
        _read(tmp_path / "a" / "simulate.json")["config_hash"]


def test_sweep_table(tmp_path):
    assert main(["sweep", "--spec", str(CONFIGS / "scalar.json"), "--out", str(tmp_path),
                 "--format", "csv", "--points", "6"]) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "t,inv_sqrt_Q_norm,inv_sqrt_Q_etAB_norm"
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    assert rows.shape == (6, 3)
    slope = np.polyfit(np.log(rows[:, 0]), np.log(rows[:, 1]), 1)[0]
    assert slope == pytest.approx(-0.5, abs=1e-6)
    # 17 significant digits round-trip exactly
    assert float(lines[1].split(",")[0]) == rows[0, 0]


@pytest.mark.slow
def test_verify_pointwise(tmp_path):
    assert main(["verify", "--spec", str(CONFIGS / "pointwise.json"), "--out", str(tmp_path),
                 "--paths", "2000", "--dt", "0.002"]) == 0
    rep = _read(tmp_path / "verify.json")
    assert rep["feedback_ranked_first"] and rep["feedback_dominates"]
    assert rep["identity"]["feedback"]["within_3se"]
