# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: banded Cholesky, Hermite nonlinear load, Picard sweep.

Every function here has a numpy/scipy twin in ``_kernels_py`` with the same
signature; ``delayflow._backend`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.float cimport DBL_MAX
from libc.math cimport INFINITY, fabs, sqrt

cnp.import_array()


def band_cholesky(double[:, ::1] ab):
    """Cholesky factor of a symmetric positive definite matrix in lower band storage.

    ``ab[d, j] = A[j + d, j]``. Returns ``c`` with the same layout holding L.
    """
    cdef Py_ssize_t p = ab.shape[0] - 1
    cdef Py_ssize_t n = ab.shape[1]
    cdef double[:, ::1] c = np.zeros((p + 1, n))
    _cholesky(ab, c, p, n)
    return np.asarray(c)


cdef int _cholesky(double[:, ::1] ab, double[:, ::1] c, Py_ssize_t p, Py_ssize_t n) except -1:
    cdef Py_ssize_t i, j, k, k0
    cdef double s
    for j in range(n):
        s = ab[0, j]
        k0 = j - p if j > p else 0
        for k in range(k0, j):
            s -= c[j - k, k] * c[j - k, k]
        if s <= 0.0:
            raise np.linalg.LinAlgError("matrix is not positive definite (pivot %d)" % j)
        c[0, j] = sqrt(s)
        for i in range(j + 1, min(n, j + p + 1)):
            s = ab[i - j, j]
            k0 = i - p if i > p else 0
            for k in range(k0, j):
                s -= c[i - k, k] * c[j - k, k]
            c[i - j, j] = s / c[0, j]
    return 0


cdef void _chol_solve(double[:, ::1] c, double[::1] x, Py_ssize_t p, Py_ssize_t n) nogil:
    # in place: forward with L, backward with L^T
    cdef Py_ssize_t i, k, k0, k1
    cdef double s
    for i in range(n):
        s = x[i]
        k0 = i - p if i > p else 0
        for k in range(k0, i):
            s -= c[i - k, k] * x[k]
        x[i] = s / c[0, i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        k1 = min(n, i + p + 1)
        for k in range(i + 1, k1):
            s -= c[k - i, i] * x[k]
        x[i] = s / c[0, i]


def band_solve(double[:, ::1] c, rhs):
    cdef double[::1] x = np.array(rhs, dtype=np.float64, copy=True)
    _chol_solve(c, x, c.shape[0] - 1, c.shape[1])
    return np.asarray(x)


cdef void _band_matvec(double[:, ::1] ab, double[::1] x, double[::1] y,
                       Py_ssize_t p, Py_ssize_t n) nogil:
    cdef Py_ssize_t j, d, i
    for i in range(n):
        y[i] = 0.0
    for j in range(n):
        y[j] += ab[0, j] * x[j]
        for d in range(1, p + 1):
            i = j + d
            if i >= n:
                break
            y[i] += ab[d, j] * x[j]
            y[j] += ab[d, j] * x[i]


def band_matvec(double[:, ::1] ab, x):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] y = np.empty(ab.shape[1])
    _band_matvec(ab, xv, y, ab.shape[0] - 1, ab.shape[1])
    return np.asarray(y)


cdef void _nonlinear_load(double[::1] z, double[::1] out, Py_ssize_t n_cells,
                          double[:, ::1] dN, double[::1] gw) nogil:
    cdef Py_ssize_t c, q, a, nq = dN.shape[0]
    cdef double zp, f
    for a in range(2 * n_cells + 2):
        out[a] = 0.0
    for c in range(n_cells):
        for q in range(nq):
            zp = 0.0
            for a in range(4):
                zp += dN[q, a] * z[2 * c + a]
            f = gw[q] * 4.0 * zp * (zp * zp - 1.0)
            for a in range(4):
                out[2 * c + a] += f * dN[q, a]


def nonlinear_load(z, Py_ssize_t n_cells, double[:, ::1] dN, double[::1] gw):
    """Vector of int F'(z') v_i' over all Hermite basis functions."""
    cdef double[::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[::1] out = np.empty(2 * n_cells + 2)
    _nonlinear_load(zv, out, n_cells, dN, gw)
    return np.asarray(out)


def picard_solve(double[:, ::1] chol, double[:, ::1] mc, rhs_known,
                 double[:, ::1] gram, double eps, z0, Py_ssize_t n_cells,
                 double[:, ::1] dN, double[::1] gw, double tol, int maxit,
                 double relax=1.0):
    """Iterate z <- (1 - w) z + w (M_mu + eps B)^{-1} (rhs_known + Mc z - eps N(z)).

    Returns ``(z, iterations, last_ratio, converged)``; the ratio is the last
    quotient of successive H2 increments (nan before two increments exist).
    """
    cdef Py_ssize_t n = chol.shape[1], i, it
    cdef Py_ssize_t p = chol.shape[0] - 1, pm = mc.shape[0] - 1, pg = gram.shape[0] - 1
    cdef double[::1] known = np.ascontiguousarray(rhs_known, dtype=np.float64)
    cdef double[::1] z = np.array(z0, dtype=np.float64, copy=True)
    cdef double[::1] znew = np.empty(n)
    cdef double[::1] work = np.empty(n)
    cdef double[::1] nl = np.empty(n)
    cdef double[::1] diff = np.empty(n)
    cdef double dnorm = 0.0, znorm, prev = -1.0, ratio = np.nan, s
    cdef bint converged = False
    with nogil:
        for it in range(1, maxit + 1):
            _band_matvec(mc, z, work, pm, n)
            _nonlinear_load(z, nl, n_cells, dN, gw)
            for i in range(n):
                znew[i] = known[i] + work[i] - eps * nl[i]
            _chol_solve(chol, znew, p, n)
            for i in range(n):
                diff[i] = relax * (znew[i] - z[i])
            _band_matvec(gram, diff, work, pg, n)
            s = 0.0
            for i in range(n):
                s += diff[i] * work[i]
            dnorm = sqrt(fabs(s))
            if not (dnorm <= DBL_MAX):
                # diverged (inf or nan); the caller sees converged = False
                ratio = INFINITY
                break
            _band_matvec(gram, z, work, pg, n)
            s = 0.0
            for i in range(n):
                s += z[i] * work[i]
            znorm = sqrt(fabs(s))
            if prev > 0.0:
                ratio = dnorm / prev
            prev = dnorm
            for i in range(n):
                z[i] += diff[i]
            if dnorm <= tol * (1.0 + znorm):
                converged = True
                break
    return np.asarray(z), it, ratio, converged


def history_quadratic(double[:, ::1] m0, double[:, ::1] m1, double[:, ::1] m2,
                      double[:, ::1] Z, Py_ssize_t K):
    """sum_k m0_k A_k^2 + 2 m1_k A_k B_k + m2_k B_k^2 per Gauss point.

    A_k = Z[0] - Z[k], B_k = Z[k] - Z[k+1]. Moment rows of width 1 broadcast
    over Gauss points (separable kernels).
    """
    cdef Py_ssize_t ng = Z.shape[1]
    cdef Py_ssize_t k, g
    cdef bint sep = m0.shape[1] == 1
    cdef double[::1] out = np.zeros(ng)
    cdef double a, b, w0, w1, w2
    with nogil:
        for k in range(K):
            if sep:
                w0 = m0[k, 0]
                w1 = 2.0 * m1[k, 0]
                w2 = m2[k, 0]
                for g in range(ng):
                    a = Z[0, g] - Z[k, g]
                    b = Z[k, g] - Z[k + 1, g]
                    out[g] += a * (w0 * a + w1 * b) + w2 * b * b
            else:
                for g in range(ng):
                    a = Z[0, g] - Z[k, g]
                    b = Z[k, g] - Z[k + 1, g]
                    out[g] += a * (m0[k, g] * a + 2.0 * m1[k, g] * b) + m2[k, g] * b * b
    return np.asarray(out)
