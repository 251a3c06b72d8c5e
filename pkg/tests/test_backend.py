"""Compiled kernels agree with the numpy fallback."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayflow import _backend
from delayflow import _kernels_py as py
from delayflow.spatial import assemble, make_grid, mass_band

cy = _backend.compiled_kernels
needs_ext = pytest.mark.skipif(cy is None, reason="compiled extension not built")


def spd_band(n, rng):
    A = rng.standard_normal((n, n))
    A = A @ A.T + n * np.eye(n)
    ab = np.zeros((4, n))
    for d in range(4):
        ab[d, : n - d] = np.diagonal(A, -d)
    # keep the band part positive definite
    ab[0] += 4 * np.abs(ab[1:]).sum(axis=0).max()
    return np.ascontiguousarray(ab)


def test_backend_selected():
    assert _backend.kernels is (cy if cy is not None else py)
    assert _backend.COMPILED == (cy is not None)


@needs_ext
@given(st.integers(4, 60), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_band_routines_agree(n, seed):
    rng = np.random.default_rng(seed)
    ab = spd_band(n, rng)
    x = rng.standard_normal(n)
    assert np.allclose(cy.band_matvec(ab, x), py.band_matvec(ab, x), rtol=1e-13, atol=1e-12)
    c1 = np.asarray(cy.band_cholesky(ab))
    c2 = np.ascontiguousarray(py.band_cholesky(ab))
    assert np.allclose(c1, c2, rtol=1e-12, atol=1e-12)
    assert np.allclose(cy.band_solve(c2, x), py.band_solve(c2, x), rtol=1e-11, atol=1e-12)


@needs_ext
@given(st.integers(4, 40), st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_nonlinear_load_agrees(n, seed):
    g = make_grid(1.5, n)
    z = np.random.default_rng(seed).standard_normal(g.ndof)
    dN, w = np.ascontiguousarray(g.dN), np.ascontiguousarray(g.weights)
    assert np.allclose(cy.nonlinear_load(z, n, dN, w), py.nonlinear_load(z, n, dN, w), rtol=1e-12, atol=1e-10)


@needs_ext
@given(st.integers(1, 30), st.integers(1, 50), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_history_quadratic_agrees(K, ng, seed):
    rng = np.random.default_rng(seed)
    m = [np.ascontiguousarray(rng.random((K + 3, ng))) for _ in range(3)]
    Z = np.ascontiguousarray(rng.standard_normal((K + 2, ng)))
    a = cy.history_quadratic(m[0], m[1], m[2], Z, K)
    b = py.history_quadratic(m[0], m[1], m[2], Z, K)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_ext
def test_picard_agrees():
    g = make_grid(2.0, 30)
    eps = 0.05
    forms = assemble(g, 1.0)
    chol = np.ascontiguousarray(py.band_cholesky(forms.operator(eps)))
    mc = mass_band(g, np.full(g.n_gauss, 0.3))
    z0 = np.zeros(g.ndof)
    z0[0::2] = 0.3 * np.sin(g.nodes)
    z0[1::2] = 0.3 * np.cos(g.nodes)
    rhs = py.band_matvec(forms.operator(eps), z0) - py.band_matvec(mc, z0)
    dN, w = np.ascontiguousarray(g.dN), np.ascontiguousarray(g.weights)
    a = cy.picard_solve(chol, mc, rhs, forms.gram, eps, z0, g.n_cells, dN, w, 1e-12, 200)
    b = py.picard_solve(chol, mc, rhs, forms.gram, eps, z0, g.n_cells, dN, w, 1e-12, 200)
    assert a[3] and b[3] and a[1] == b[1]
    assert np.allclose(a[0], b[0], rtol=1e-12, atol=1e-12)


def test_pure_python_override():
    import os
    import subprocess
    import sys

    env = dict(os.environ, DELAYFLOW_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from delayflow import _backend; print(_backend.COMPILED)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
