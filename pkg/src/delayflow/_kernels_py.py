"""Vectorised numpy/scipy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded


def band_cholesky(ab):
    return cholesky_banded(np.asarray(ab, dtype=float), lower=True)


def band_solve(c, rhs):
    return cho_solve_banded((np.asarray(c), True), np.asarray(rhs, dtype=float), check_finite=False)


def band_matvec(ab, x):
    ab = np.asarray(ab)
    x = np.asarray(x, dtype=float)
    n = ab.shape[1]
    y = ab[0] * x
    for d in range(1, ab.shape[0]):
        y[d:] += ab[d, : n - d] * x[: n - d]
        y[: n - d] += ab[d, : n - d] * x[d:]
    return y


def nonlinear_load(z, n_cells, dN, gw):
    z = np.asarray(z, dtype=float)
    local = np.lib.stride_tricks.sliding_window_view(z, 4)[::2]
    zp = local @ np.asarray(dN).T
    f = 4.0 * zp * (zp * zp - 1.0) * np.asarray(gw)
    contrib = f @ np.asarray(dN)
    out = np.zeros(2 * n_cells + 2)
    out[: 2 * n_cells] += contrib[:, :2].ravel()
    out[2:] += contrib[:, 2:].ravel()
    return out


def picard_solve(chol, mc, rhs_known, gram, eps, z0, n_cells, dN, gw, tol, maxit, relax=1.0):
    z = np.array(z0, dtype=float)
    prev = -1.0
    ratio = np.nan
    converged = False
    it = 0
    # overflow in a diverging iterate is reported through converged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, maxit + 1):
            rhs = rhs_known + band_matvec(mc, z) - eps * nonlinear_load(z, n_cells, dN, gw)
            znew = band_solve(chol, rhs)
            diff = relax * (znew - z)
            dnorm = np.sqrt(abs(diff @ band_matvec(gram, diff)))
            znorm = np.sqrt(abs(z @ band_matvec(gram, z)))
            if not np.isfinite(dnorm):
                # diverged; the caller sees converged = False
                ratio = np.inf
                break
            if prev > 0.0:
                ratio = dnorm / prev
            prev = dnorm
            z = z + diff
            if dnorm <= tol * (1.0 + znorm):
                converged = True
                break
    return z, it, ratio, converged


def history_quadratic(m0, m1, m2, Z, K):
    A = Z[0][None, :] - Z[:K]
    B = Z[:K] - Z[1:K + 1]
    return np.sum(m0[:K] * A * A + 2.0 * m1[:K] * A * B + m2[:K] * B * B, axis=0)
