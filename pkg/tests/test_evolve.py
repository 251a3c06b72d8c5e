import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayflow import steady_states as ss
from delayflow.delay import History, constant_past, expression_past
from delayflow.evolve import (AmbiguousStabilization, FixedPointFailure, RunConfig, Trajectory,
                              detect_stabilization, run_delayed, run_limit, step_delayed, step_limit)
from delayflow.kernel import make_exponential_kernel, moments
from delayflow.spatial import ConfigurationError, FieldState, assemble, gram_band, h2_norm, make_grid

L = 2.0


@pytest.fixture(scope="module")
def kernel():
    return make_exponential_kernel(1.0, L=L)


def steady(grid, bid, K=0.3):
    br = {b.id: b for b in ss.enumerate_branches(grid.L)}[bid]
    return ss.polish(ss.select_constant(br, 1.0, K, grid), 1.0, K)


def cfg_for(kernel, past, eps=0.05, t_end=0.1, n=24, **kw):
    return RunConfig(L=L, n_cells=n, kernel=kernel, past=past, eps=eps, t_end=t_end, **kw)


def test_runconfig_invariants(kernel):
    past = constant_past(0.0)
    with pytest.raises(ConfigurationError, match="run.eps must be >= 0"):
        cfg_for(kernel, past, eps=-1.0)
    with pytest.raises(ConfigurationError):
        cfg_for(kernel, past, dt=0.0)
    with pytest.raises(ConfigurationError):
        cfg_for(kernel, past, fp_tol=1.0)
    assert cfg_for(kernel, past).dt == 0.05 / 20
    assert cfg_for(kernel, past, eps=0.0).dt == 1e-3


@pytest.mark.parametrize("bid", ["w+1", "n1+"])
def test_step_delayed_keeps_steady_state(kernel, bid):
    g = make_grid(L, 24)
    Z = steady(g, bid)
    h = History(g, kernel, constant_past(Z.values), 0.05, 0.0025)
    forms = assemble(g, h.mu_quad)
    for _ in range(3):
        st_ = step_delayed(h, forms)
        assert h2_norm(st_.z.dofs - Z.values.dofs, forms.gram) < 1e-9
        h.push(st_.z)


def test_step_delayed_zero(kernel):
    g = make_grid(L, 12)
    h = History(g, kernel, constant_past(0.0, grid=g), 0.1, 0.005)
    st_ = step_delayed(h, assemble(g, h.mu_quad))
    assert np.all(st_.z.dofs == 0.0)


def test_contraction_improves_with_eps(kernel):
    past = expression_past("0.5*sin(pi*s/L)", L)
    ratios = []
    for eps in (0.1, 0.05, 0.025):
        tr = run_delayed(cfg_for(kernel, past, eps=eps, t_end=2 * eps / 20, detect=False))
        r = tr.column("contraction")
        assert np.all(r < 1)
        ratios.append(r[0])
    assert ratios[0] > ratios[1] > ratios[2]


def test_step_residual_small(kernel):
    g = make_grid(L, 24)
    past = expression_past("0.5*sin(pi*s/L)", L, grid=g)
    h = History(g, kernel, past, 0.05, 0.0025)
    forms = assemble(g, h.mu_quad)
    st_ = step_delayed(h, forms)
    scale = np.linalg.norm(forms.operator(0.05)[0]) * (1 + np.linalg.norm(st_.z.dofs))
    assert st_.residual <= 1e-10 * scale


def test_run_delayed_steady_past(kernel):
    g = make_grid(L, 24)
    Z = steady(g, "w+1")
    tr = run_delayed(cfg_for(kernel, constant_past(Z.values), t_end=0.25, detect=False))
    E = tr.column("E")
    assert np.ptp(E) < 1e-12
    assert np.max(np.abs(tr.column("theta") - tr.kappa)) < 1e-12
    assert tr.jump < 1e-10 and tr.status == "ReachedTEnd"
    assert np.all(np.diff(tr.times) > 0)


def test_fixed_point_failure_is_loud(kernel):
    # eps far outside the small-eps regime: the Picard map expands and the (empty) trajectory is attached
    past = expression_past("0.5*sin(pi*s/L)", L)
    cfg = cfg_for(kernel, past, eps=1.0, dt=0.5, t_end=1.0, detect=False, fp_maxit=50)
    with pytest.raises(FixedPointFailure) as ei:
        run_delayed(cfg)
    assert ei.value.trajectory.status == "FixedPointFailure"
    assert ei.value.ratio > 1


def test_step_limit_fixed_points(kernel):
    g = make_grid(L, 24)
    forms = assemble(g, 1.0, weight1=1.0)
    Z = steady(g, "n1-")
    out = step_limit(Z.values, forms, 1e-2)
    assert h2_norm(out.z.dofs - Z.values.dofs, forms.gram) < 1e-9
    c = FieldState.constant(g, 0.4)
    assert np.allclose(step_limit(c, forms, 1e-2).z.dofs, c.dofs, atol=1e-13)


@given(st.sampled_from(["newton", "semi-implicit"]), st.floats(0.01, 0.2))
@settings(max_examples=6, deadline=None)
def test_limit_conserves_weighted_mean(kernel, scheme, amp):
    past = expression_past(f"s + {amp}*sin(2*pi*s/L)", L)
    tr = run_limit(cfg_for(kernel, past, eps=0.0, dt=1e-2, t_end=0.3, limit_scheme=scheme, detect=False))
    assert np.max(np.abs(tr.column("mu1_inner") - tr.kappa)) <= 10 * 1e-11
    assert np.all(np.diff(tr.column("E")) <= 1e-13)


def test_limit_near_affine_approaches_affine(kernel):
    g = make_grid(L, 24)
    past = expression_past("s + 0.1*sin(2*pi*s/L)", L)
    tr = run_limit(cfg_for(kernel, past, eps=0.0, dt=1e-2, t_end=0.5, detect=False))
    K0 = tr.kappa
    Z = ss.select_constant({b.id: b for b in ss.enumerate_branches(L)}["w+1"], 1.0, K0, g)
    G = gram_band(g)
    d = [h2_norm(z.dofs - Z.values.dofs, G) for z in tr.states]
    assert np.all(np.diff(d) < 0)


def test_detect_stabilization(kernel):
    g = make_grid(L, 24)
    cands = [steady(g, b, 0.0) for b in ("w0", "w+1", "w-1", "n1+", "n1-")]
    Z = cands[3]
    tr = Trajectory(times=[0.0, 0.1], states=[Z.values, Z.values])
    assert detect_stabilization(tr, cands, tol=1e-6) is cands[3]
    tr_far = Trajectory(times=[0.0], states=[FieldState.constant(g, 5.0)])
    assert detect_stabilization(tr_far, cands) is None
    with pytest.raises(AmbiguousStabilization):
        detect_stabilization(tr, cands, tol=10.0)


def test_run_limit_stabilizes_on_affine(kernel):
    past = expression_past("s + 0.1*sin(2*pi*s/L)", L)
    tr = run_limit(cfg_for(kernel, past, eps=0.0, dt=1e-2, t_end=5.0))
    assert tr.status == "Stabilized" and tr.matched.branch.id == "w+1"
    assert abs(ss.inner(tr.matched.values, moments(kernel).mu1) - tr.kappa) < 1e-10
