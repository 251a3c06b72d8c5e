import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayflow.delay import (History, HistoryCoverageError, analytic_past, constant_past, delay_energy,
                             delay_operator, delayed_source, dissipation_rate, expression_past, init_history,
                             theta_invariant)
from delayflow.kernel import make_exponential_kernel, moments
from delayflow.spatial import ConfigurationError, FieldState, make_grid


def march(h, f, t_end):
    """Push levels z(t_k) = f(t_k) (spatially constant) for t_k = 0, dt, ..., t_end."""
    g = h.grid
    for k in range(int(round(t_end / h.dt)) + 1):
        h.push(FieldState.constant(g, f(k * h.dt)))


def test_slot_counts():
    g = make_grid(1.0, 4)
    k30 = make_exponential_kernel(1.0, L=1.0, a_max=30.0)
    assert init_history(constant_past(0.0), 0.1, 0.01, 30.0, grid=g, kernel=k30).slots == 302
    k40 = make_exponential_kernel(1.0, L=1.0, a_max=40.0)
    assert init_history(constant_past(0.0), 1e-3, 1e-3, 40.0, grid=g, kernel=k40).slots == 42


def test_memory_budget():
    g = make_grid(1.0, 200)
    k = make_exponential_kernel(1.0, L=1.0, a_max=1e5)
    with pytest.raises(ConfigurationError, match="larger dt or a smaller a_max"):
        History(g, k, constant_past(0.0), 1.0, 1e-3)


def test_constant_past_queries():
    g = make_grid(1.0, 4)
    h = History(g, make_exponential_kernel(1.0, L=1.0), constant_past(0.7), 0.1, 0.005)
    assert np.all(h.values_at(-3.0) == 0.7)
    with pytest.raises(HistoryCoverageError):
        h.values_at(0.1)


@given(st.floats(-2.0, 2.0), st.sampled_from([0.02, 0.1, 0.5]))
@settings(max_examples=15, deadline=None)
def test_constant_history(c, eps):
    g = make_grid(1.0, 4)
    k = make_exponential_kernel(lambda s: 1.0 + s, L=1.0)
    h = History(g, k, constant_past(c), eps, eps / 10)
    march(h, lambda t: c, 2 * h.dt)
    assert np.allclose(delayed_source(h), c * h.mu_quad, atol=1e-12)
    assert np.allclose(delay_operator(h), 0.0, atol=1e-10)
    assert abs(delay_energy(h)) < 1e-20 and abs(dissipation_rate(h)) < 1e-18


def test_theta_constant_history():
    g = make_grid(1.0, 4)
    h = History(g, make_exponential_kernel(1.0, L=1.0), constant_past(2.5), 0.1, 0.01)
    assert abs(h.kappa - 2.5) < 1e-9
    march(h, lambda t: 2.5, 0.05)
    assert abs(theta_invariant(h) - 2.5) < 1e-9


@pytest.mark.parametrize("eps", [0.05, 0.2])
def test_linear_in_time_history(eps):
    # z = t: L_eps[z] = int a rho da = mu1, delay energy = eps, dissipation = -1 (exponential kernel)
    g = make_grid(1.0, 4)
    k = make_exponential_kernel(1.0, L=1.0)
    h = History(g, k, analytic_past(lambda s, t: 0 * s + t, lambda s, t: 0 * s + 0 * t), eps, eps / 20)
    march(h, lambda t: t, 1.0)
    assert np.allclose(delay_operator(h), moments(k).mu1(g.gauss_points), atol=1e-8)
    assert abs(delay_energy(h) - eps) < 1e-8
    assert abs(dissipation_rate(h) + delay_energy(h) / eps) < 1e-8


def test_quadratic_in_time_history():
    g = make_grid(1.0, 4)
    eps = 0.1
    h = History(g, make_exponential_kernel(1.0, L=1.0),
                analytic_past(lambda s, t: 0 * s + t * t, lambda s, t: 0 * s + 0 * t), eps, 1e-3)
    march(h, lambda t: t * t, 1.0)
    # piecewise-linear history: error <= dt^2 / (8 eps) * int rho
    assert np.allclose(delay_operator(h, t=1.0), 1.8, atol=2e-6)


def test_frozen_linear_past_source():
    # past z_p = t, no forward levels: g = int (-eps a) e^{-a} da = -eps
    g = make_grid(1.0, 4)
    eps = 0.3
    h = History(g, make_exponential_kernel(1.0, L=1.0),
                analytic_past(lambda s, t: 0 * s + t, lambda s, t: 0 * s + 0 * t), eps, eps / 10)
    assert np.allclose(delayed_source(h), -eps, atol=1e-9)


def test_exponential_dissipation_identity_generic_history():
    g = make_grid(2.0, 8)
    eps = 0.1
    h = History(g, make_exponential_kernel(1.0, L=2.0), expression_past("0.5*sin(pi*s/L)*cos(t)", 2.0), eps, eps / 10)
    for k in range(30):
        t = k * h.dt
        h.push(FieldState.from_functions(g, lambda s: 0.4 * np.sin(np.pi * s / 2) + t * s,
                                         lambda s: 0.2 * np.pi * np.cos(np.pi * s / 2) + t))
    assert abs(dissipation_rate(h) + delay_energy(h) / eps) < 1e-12 * (1 + delay_energy(h) / eps)


def test_argument_checks():
    g = make_grid(1.0, 4)
    h = History(g, make_exponential_kernel(1.0, L=1.0), constant_past(0.0), 0.1, 0.01)
    with pytest.raises(ConfigurationError):
        delayed_source(h, eps=0.2)
    with pytest.raises(ConfigurationError):
        History(g, make_exponential_kernel(1.0, L=1.0), constant_past(0.0), 0.0, 0.01)
    with pytest.raises(ConfigurationError):
        init_history(constant_past(0.0), 0.1, 0.01, 5.0, grid=g, kernel=make_exponential_kernel(1.0, L=1.0))


def test_expression_past_errors():
    with pytest.raises(ConfigurationError):
        expression_past("sin(q*s)", 1.0)
    p = expression_past("s*L + t", 2.0)
    assert p.time_dependent and p(np.array([1.0]), -1.0)[0] == 1.0
