import json

import numpy as np
import pytest

from delayflow.config import (DEFAULTS, build_config, default_config, output_dir, parse_config, write_config,
                              write_outputs)
from delayflow.evolve import run_delayed
from delayflow.spatial import ConfigurationError

MINIMAL = {"grid": {"L": 2.0, "n_cells": 16}, "run": {"eps": 0.05, "t_end": 0.01}}


def with_(base, **sections):
    d = json.loads(json.dumps(base))
    for sec, vals in sections.items():
        d.setdefault(sec, {}).update(vals)
    return d


def test_minimal_config_gets_defaults():
    cfg = build_config(MINIMAL)
    assert cfg.dt == 0.05 / 20 and cfg.fp_tol == 1e-10 and cfg.seed == 0
    assert cfg.raw["kernel"]["family"] == "exponential"
    assert cfg.raw["past_data"]["expression"] == "0.5*sin(pi*s/L)"
    assert cfg.raw["study"] == DEFAULTS["study"]


@pytest.mark.parametrize("patch,msg", [
    ({"run": {"eps": -0.1}}, "run.eps must be >= 0"),
    ({"run": {"fp_tol": 2.0}}, "run.fp_tol must lie in"),
    ({"grid": {"n_cells": 2}}, "grid.n_cells must be >= 4"),
    ({"run": {"epsilon": 0.1}}, "run.epsilon is not a recognised key"),
    ({"kernel": {"family": "power", "m": 2.0}}, "kernel: hypothesis failure"),
    ({"kernel": {"family": "exponential", "speed": 1}}, "kernel.speed is not a recognised key"),
    ({"past_data": {"kind": "steady", "branch": "n7+"}}, "past_data.branch must be one of"),
    ({"past_data": {"expression": "sin(q)"}}, "past_data.expression"),
    ({"past_data": {"kind": "file", "file": "missing.csv"}}, "past_data.file: file 'missing.csv' does not exist"),
    ({"study": {"eps_list": [0.1, 0.2]}}, "study.eps_list must be strictly decreasing"),
])
def test_invalid_values_name_the_key(patch, msg):
    with pytest.raises(ConfigurationError, match=msg.replace(".", r"\.").replace("(", r"\(")):
        build_config(with_(MINIMAL, **patch))


def test_missing_required():
    with pytest.raises(ConfigurationError, match="run.t_end is required"):
        build_config({"grid": {"L": 1.0}, "run": {"eps": 0.1}})
    with pytest.raises(ConfigurationError, match="bogus is not a recognised section"):
        build_config({**MINIMAL, "bogus": {}})


def test_parse_error_has_line_and_column(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"grid": {"L": 2.0,}\n}')
    with pytest.raises(ConfigurationError) as ei:
        parse_config(p)
    assert ei.value.line == 1 and ei.value.column == 20
    assert str(ei.value).startswith(f"{p}:1:20:")


def test_default_config_round_trip(tmp_path):
    raw = default_config()
    write_config(raw, tmp_path / "c.json")
    assert parse_config(tmp_path / "c.json").raw == raw


def test_seed_changes_perturbation_only_when_amplitude():
    pert = {"past_data": {"kind": "steady", "branch": "w+1", "perturbation": {"amplitude": 0.01}}}
    g = np.linspace(0, 2, 9)
    a = build_config(with_(MINIMAL, **pert), seed=1).past(g, 0.0)
    b = build_config(with_(MINIMAL, **pert), seed=1).past(g, 0.0)
    c = build_config(with_(MINIMAL, **pert), seed=2).past(g, 0.0)
    assert np.array_equal(a, b) and not np.allclose(a, c)
    p0 = build_config(MINIMAL, seed=1).past(g, 0.0)
    p1 = build_config(MINIMAL, seed=2).past(g, 0.0)
    assert np.array_equal(p0, p1)


def test_tabulated_expression_and_file(tmp_path):
    cfg = build_config(with_(MINIMAL, kernel={"family": "tabulated", "expression": "exp(-a)", "n_a": 3201}))
    s, a = np.linspace(0, 2, 3), np.linspace(0, 32, 3201)
    rows = [(si, ai, np.exp(-ai)) for si in s for ai in a]
    np.savetxt(tmp_path / "k.csv", rows, delimiter=",", header="s,a,rho", comments="")
    cfg2 = parse_config_from(tmp_path, with_(MINIMAL, kernel={"family": "tabulated", "file": "k.csv"}))
    x = np.linspace(0, 2, 5)
    assert np.allclose(cfg.kernel.rho(x, 1.0), cfg2.kernel.rho(x, 1.0), atol=1e-12)


def parse_config_from(folder, data):
    p = folder / "cfg.json"
    p.write_text(json.dumps(data))
    return parse_config(p)


def test_output_root(tmp_path, monkeypatch):
    cfg = build_config(MINIMAL)
    monkeypatch.setenv("DELAYFLOW_OUTPUT_ROOT", str(tmp_path))
    assert output_dir(cfg) == tmp_path / "out"
    assert output_dir(cfg, tmp_path / "abs") == tmp_path / "abs"


def test_outputs_byte_identical(tmp_path):
    data = with_(MINIMAL, outputs={"snapshot_every": 2},
                 past_data={"kind": "steady", "perturbation": {"amplitude": 0.01}})
    for d in ("a", "b"):
        cfg = build_config(data, seed=7)
        s = write_outputs(run_delayed(cfg), paths=tmp_path / d, config=cfg)
    a, b = (tmp_path / "a" / "diagnostics.csv").read_bytes(), (tmp_path / "b" / "diagnostics.csv").read_bytes()
    assert a == b
    assert a.splitlines()[0] == b"t,E,delay_E,diss_rate,theta,mu1_inner,fp_iters,contraction"
    assert s["snapshots"] and (tmp_path / "a" / s["snapshots"][0]["file"]).is_file()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["config"]["run"]["seed"] == 7 and summary["partial"] is False
