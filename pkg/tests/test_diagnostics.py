import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayflow import diagnostics as dg
from delayflow import steady_states as ss
from delayflow.delay import constant_past, expression_past
from delayflow.evolve import RunConfig, run_delayed, run_limit
from delayflow.kernel import make_exponential_kernel
from delayflow.spatial import ConfigurationError, make_grid

L = 2.0
K = make_exponential_kernel(1.0, L=L)


def cfg(past, eps=0.05, t_end=0.1, n=16, **kw):
    return RunConfig(L=L, n_cells=n, kernel=K, past=past, eps=eps, t_end=t_end, **kw)


def steady_past(n=16, bid="w+1", Kv=0.2):
    g = make_grid(L, n)
    br = {b.id: b for b in ss.enumerate_branches(L)}[bid]
    return constant_past(ss.polish(ss.select_constant(br, 1.0, Kv, g), 1.0, Kv).values)


@given(st.floats(-1.0, 2.0), st.floats(0.1, 10.0))
@settings(max_examples=30, deadline=None)
def test_fit_exact_power_law(p, c):
    x = np.array([1e-1, 5e-2, 2.5e-2, 1.25e-2])
    f = dg.fit_slope(x, c * x**p, expected=p)
    assert abs(f.slope - p) < 1e-9 and f.residual < 1e-9 and f.passed


def test_fit_inconclusive_and_floor():
    x = [1e-1, 5e-2, 2.5e-2, 1.25e-2]
    f = dg.fit_slope(x[:3], [1, 2, 3], expected=0.5)
    assert f.inconclusive and not f.passed
    g = dg.fit_slope(x, [1e-3, 1e-13, 1e-3, 1e-3], expected=0.5, floor=1e-12)
    assert g.inconclusive and g.n == 3


def test_fit_one_sided_rule():
    x = np.array([1e-2, 1e-3, 1e-4, 1e-5])
    # saturating data: poor power-law fit, but every local slope clears the bound
    y = 1.0 - np.sqrt(x)
    f = dg.fit_slope(x, y, expected=0.0)
    assert f.residual > 0 and min(f.local) >= f.bound and f.passed
    bad = dg.fit_slope(x, x**0.2, expected=0.5)
    assert not bad.passed


def test_sweep_requires_decreasing_eps():
    with pytest.raises(ConfigurationError):
        dg.SweepResult("x", [0.1, 0.2])
    r = dg.SweepResult("x", [0.2, 0.1], metrics={"m": [1.0, 2.0]})
    assert r.rows() == [{"eps": 0.2, "m": 1.0}, {"eps": 0.1, "m": 2.0}]
    assert not r.passed  # no fits


def test_steady_trajectory_series():
    tr = run_delayed(cfg(steady_past(), t_end=0.05, detect=False))
    E = dg.energy_series(tr)
    assert np.ptp(E.values) < 1e-13
    assert dg.mu1_drift_series(tr).max() < 1e-12
    assert dg.theta_drift(tr) < 1e-12
    assert dg.energy_increase(tr, 1e-10, tr.times[1]) <= 0


def test_generic_run_monotone_energy():
    c = cfg(expression_past("0.5*sin(pi*s/L)", L), t_end=0.5, detect=False)
    tr = run_delayed(c)
    assert dg.energy_increase(tr, c.fp_tol, c.dt) <= 0
    mis = dg.dissipation_mismatch(tr, c.dt, t_min=0.1)
    assert mis["ok"], mis


def test_limit_run_drift_and_identity():
    c = cfg(expression_past("s + 0.1*sin(2*pi*s/L)", L), eps=0.0, dt=1e-2, t_end=0.5, detect=False)
    tr = run_limit(c)
    assert dg.mu1_drift_series(tr).max() <= 10 * c.newton_tol
    assert dg.energy_identity_defect(tr, t0=0.05) < 0.1 * (tr.column("E")[0] - tr.column("E")[-1])
    assert dg.cumulative_dissipation(tr) > 0


def test_resolvent_probe_constant_forcing():
    g = make_grid(L, 40)
    r = dg.resolvent_scaling_probe(g, K, [1e-2, 1e-3, 1e-4, 1e-5], j=0, forcing="g", g=lambda s: 2.0 + 0 * s)
    assert np.allclose(r.metrics["norm_d0"], 2.0 * math.sqrt(L), rtol=1e-9)


def test_resolvent_probe_f_forcing_gain():
    g = make_grid(L, 200)
    r = dg.resolvent_scaling_probe(g, K, [1e-2, 1e-3, 1e-4, 1e-5], j=0, forcing="f")
    assert r.fits["norm_d0"].slope >= 0.75 - dg.SLOPE_TOL and r.passed


def test_jump_study_steady_past_is_noise():
    r = dg.jump_study(cfg(steady_past()), [0.1, 0.05, 0.025, 0.0125])
    assert max(r.metrics["jump"]) < 1e-9
    assert "inconclusive" in r.flags and not r.passed


def test_holder_equal_eps_and_probe_flag():
    c = cfg(expression_past("0.5*sin(pi*s/L)", L), t_end=0.05)
    r = dg.holder_study(c, [[0.1, 0.1]], t_probe=0.05)
    assert r.metrics["h2_distance"] == [0.0]
    assert "inconclusive" in r.flags
    r2 = dg.holder_study(c, [[0.02, 0.01]], t_probe=0.05)
    assert "t_probe_exceeds_eps" in r2.flags


def test_eps_convergence_steady_data_distances_vanish():
    past = steady_past(bid="w+1", Kv=0.2)
    r = dg.eps_convergence_study(cfg(past, t_end=0.02), [0.04, 0.02, 0.01, 0.005])
    assert max(r.metrics["l2h2_distance"]) < 1e-9
