import csv
import io
import json

import pytest

from delayflow.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, EXIT_STABILIZED, main


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def base(eps=0.05, t_end=0.02, **run):
    return {"grid": {"L": 2.0, "n_cells": 16}, "run": {"eps": eps, "t_end": t_end, **run}}


def test_simulate_writes_outputs(tmp_path, capsys):
    rc = main(["simulate", "--config", write(tmp_path, base(detect=False)), "--out-dir", str(tmp_path / "o")])
    assert rc == EXIT_OK
    line = json.loads(capsys.readouterr().out.strip())
    assert line["status"] == "ReachedTEnd"
    assert (tmp_path / "o" / "diagnostics.csv").is_file()


def test_simulate_steady_past_stabilizes(tmp_path):
    data = {**base(t_end=1.0, stab_window=5), "past_data": {"kind": "steady", "branch": "w+1", "K": 0.2}}
    rc = main(["simulate", "--config", write(tmp_path, data), "--out-dir", str(tmp_path / "o")])
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert rc == EXIT_STABILIZED and summary["status"] == "Stabilized"
    assert summary["matched_branch"] == "w+1"


def test_fixed_point_failure_exit(tmp_path, capsys):
    data = base(eps=1.0, t_end=1.0, dt=0.5, fp_maxit=50, detect=False)
    rc = main(["simulate", "--config", write(tmp_path, data), "--out-dir", str(tmp_path / "o")])
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert rc == EXIT_FAILURE
    assert summary["status"] == "FixedPointFailure" and summary["partial"] is True


def test_limit_subcommand(tmp_path, monkeypatch):
    monkeypatch.setenv("DELAYFLOW_OUTPUT_ROOT", str(tmp_path))
    data = {**base(eps=0.0, t_end=5.0, dt=1e-2), "past_data": {"expression": "s + 0.1*sin(2*pi*s/L)"}}
    rc = main(["limit", "--config", write(tmp_path, data)])
    assert rc == EXIT_STABILIZED
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["matched_branch"] == "w+1"


@pytest.mark.parametrize("cmd,eps", [("simulate", 0.0), ("limit", 0.05)])
def test_eps_checked_against_subcommand(tmp_path, capsys, cmd, eps):
    assert main([cmd, "--config", write(tmp_path, base(eps=eps))]) == EXIT_CONFIG
    assert "run.eps must be" in capsys.readouterr().err


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["simulate", "--config", write(tmp_path, base(eps=-1.0))]) == EXIT_CONFIG
    assert "run.eps must be >= 0" in capsys.readouterr().err
    bad = tmp_path / "syn.json"
    bad.write_text('{"grid": {"L": 2,}}')
    assert main(["simulate", "--config", str(bad)]) == EXIT_CONFIG
    assert f"{bad}:1:18:" in capsys.readouterr().err
    data = {**base(), "kernel": {"family": "power", "m": 2.0}}
    assert main(["check-kernel", "--config", write(tmp_path, data)]) == EXIT_CONFIG


def test_seed_override_changes_output(tmp_path):
    data = {**base(detect=False), "past_data": {"kind": "steady", "perturbation": {"amplitude": 0.05}}}
    p = write(tmp_path, data)
    outs = []
    for seed, d in ((1, "a"), (1, "b"), (2, "c")):
        main(["simulate", "--config", p, "--seed", str(seed), "--out-dir", str(tmp_path / d)])
        outs.append((tmp_path / d / "diagnostics.csv").read_bytes())
    assert outs[0] == outs[1] != outs[2]


def test_steady_states_table(capsys):
    assert main(["steady-states", "--L", "2", "--n-cells", "40"]) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["branch"] for r in rows][:3] == ["w0", "w+1", "w-1"]
    assert {r["branch"] for r in rows} >= {"n1+", "n1-"}
    assert main(["steady-states"]) == EXIT_CONFIG


def test_check_kernel_report(tmp_path, capsys):
    assert main(["check-kernel", "--config", write(tmp_path, base())]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["passed"] is True


def test_sweep_resolvent(tmp_path, capsys):
    data = {**base(), "study": {"eps_list": [1e-2, 1e-3, 1e-4, 1e-5], "forcing": "f", "j": 0}}
    data["grid"]["n_cells"] = 100
    rc = main(["sweep", "--config", write(tmp_path, data), "--study", "resolvent", "--out-dir", str(tmp_path)])
    assert rc == EXIT_OK
    assert "pass" in capsys.readouterr().out
    summary = json.loads((tmp_path / "sweep_resolvent.json").read_text())
    assert summary["config"]["study"]["forcing"] == "f"
    assert (tmp_path / "sweep_resolvent.csv").read_text().startswith("eps,")
