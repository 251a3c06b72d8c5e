"""Piecewise-cubic Hermite (H2-conforming) discretisation of the interval (0, L).

Degrees of freedom are interleaved per node: ``[z_0, z'_0, z_1, z'_1, ...]``.
Symmetric matrices are kept in LAPACK lower band storage, ``ab[d, j] = A[j+d, j]``
with half-bandwidth 3.
"""
from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ._backend import kernels

GAUSS_POINTS = 5
BANDWIDTH = 3


def F(xi):
    """Double-well potential (xi^2 - 1)^2."""
    return (xi * xi - 1.0) ** 2


def dF(xi):
    return 4.0 * xi * (xi * xi - 1.0)


def d2F(xi):
    return 12.0 * xi * xi - 4.0


class ConfigurationError(ValueError):
    pass


class SingularSystemError(RuntimeError):
    pass


def _hermite_tables(xi, h):
    """Values, first and second s-derivatives of the four cell shape functions."""
    N = np.stack([1 - 3 * xi**2 + 2 * xi**3,
                  h * (xi - 2 * xi**2 + xi**3),
                  3 * xi**2 - 2 * xi**3,
                  h * (-xi**2 + xi**3)], axis=-1)
    dN = np.stack([(-6 * xi + 6 * xi**2) / h,
                   1 - 4 * xi + 3 * xi**2,
                   (6 * xi - 6 * xi**2) / h,
                   -2 * xi + 3 * xi**2], axis=-1)
    d2N = np.stack([(-6 + 12 * xi) / h**2,
                    (-4 + 6 * xi) / h,
                    (6 - 12 * xi) / h**2,
                    (-2 + 6 * xi) / h], axis=-1)
    return N, dN, d2N


@dataclass(frozen=True, eq=False)
class Grid:
    L: float
    n_cells: int
    nodes: np.ndarray = field(repr=False)
    h: float
    xi: np.ndarray = field(repr=False)          # reference Gauss abscissae on [0, 1]
    weights: np.ndarray = field(repr=False)     # Gauss weights scaled by h
    points: np.ndarray = field(repr=False)      # (n_cells, 5) physical Gauss points
    N: np.ndarray = field(repr=False)
    dN: np.ndarray = field(repr=False)
    d2N: np.ndarray = field(repr=False)

    @property
    def ndof(self) -> int:
        return 2 * (self.n_cells + 1)

    @property
    def n_gauss(self) -> int:
        return self.n_cells * GAUSS_POINTS

    @property
    def gauss_points(self) -> np.ndarray:
        return self.points.ravel()

    @functools.cached_property
    def gauss_weights(self) -> np.ndarray:
        return np.tile(self.weights, self.n_cells)

    def cell_dofs(self, dofs: np.ndarray) -> np.ndarray:
        """(n_cells, 4) view of the local degrees of freedom."""
        d = np.ascontiguousarray(dofs)
        st = d.strides[0]
        return np.lib.stride_tricks.as_strided(d, shape=(self.n_cells, 4), strides=(2 * st, st), writeable=False)

    def eval_matrix(self, deriv: int = 0) -> sp.csr_matrix:
        """Sparse map from DOFs to values at all Gauss points."""
        return _eval_matrix(self, deriv)

    def sample(self, f) -> np.ndarray:
        """Evaluate a scalar, callable or ready Gauss-point array as a flat Gauss-point array."""
        if callable(f):
            return np.broadcast_to(np.asarray(f(self.gauss_points), dtype=float), (self.n_gauss,)).copy()
        arr = np.asarray(f, dtype=float)
        if arr.ndim == 0:
            return np.full(self.n_gauss, float(arr))
        if arr.size != self.n_gauss:
            raise ConfigurationError(f"spatial field has {arr.size} samples, expected {self.n_gauss} Gauss points")
        return arr.ravel()

    def integrate(self, values_g) -> float:
        return float(np.dot(self.gauss_weights, np.asarray(values_g).ravel()))


@functools.lru_cache(maxsize=64)
def _eval_matrix(grid: Grid, deriv: int) -> sp.csr_matrix:
    table = (grid.N, grid.dN, grid.d2N)[deriv]
    nq = GAUSS_POINTS
    rows = np.repeat(np.arange(grid.n_gauss), 4)
    cells = np.repeat(np.arange(grid.n_cells), nq * 4)
    cols = 2 * cells + np.tile(np.arange(4), grid.n_gauss)
    vals = np.tile(table.ravel(), grid.n_cells)
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_gauss, grid.ndof))


@functools.lru_cache(maxsize=64)
def _eval_matrix_t(grid: Grid, deriv: int) -> sp.csr_matrix:
    return _eval_matrix(grid, deriv).T.tocsr()


def make_grid(L: float, n_cells: int) -> Grid:
    if not (L > 0) or not np.isfinite(L):
        raise ConfigurationError(f"grid.L must be > 0, got {L}")
    if int(n_cells) != n_cells or n_cells < 4:
        raise ConfigurationError(f"grid.n_cells must be an integer >= 4, got {n_cells}")
    n_cells = int(n_cells)
    h = L / n_cells
    x, w = np.polynomial.legendre.leggauss(GAUSS_POINTS)
    xi = 0.5 * (x + 1.0)
    nodes = np.linspace(0.0, L, n_cells + 1)
    points = nodes[:-1, None] + h * xi[None, :]
    N, dN, d2N = _hermite_tables(xi, h)
    return Grid(L=float(L), n_cells=n_cells, nodes=nodes, h=h, xi=xi, weights=0.5 * w * h,
                points=points, N=N, dN=dN, d2N=d2N)


@dataclass(frozen=True, eq=False)
class FieldState:
    """A C1 piecewise-cubic Hermite field on a grid."""

    grid: Grid
    dofs: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.dofs, dtype=float)
        if d.shape != (self.grid.ndof,):
            raise ConfigurationError(f"expected {self.grid.ndof} DOFs, got shape {d.shape}")
        object.__setattr__(self, "dofs", d)

    @classmethod
    def from_functions(cls, grid: Grid, f, df) -> "FieldState":
        dofs = np.empty(grid.ndof)
        dofs[0::2] = np.broadcast_to(f(grid.nodes), grid.nodes.shape)
        dofs[1::2] = np.broadcast_to(df(grid.nodes), grid.nodes.shape)
        return cls(grid, dofs)

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "FieldState":
        dofs = np.zeros(grid.ndof)
        dofs[0::2] = c
        return cls(grid, dofs)

    @property
    def values(self) -> np.ndarray:
        return self.dofs[0::2]

    @property
    def slopes(self) -> np.ndarray:
        return self.dofs[1::2]

    def gauss(self, deriv: int = 0) -> np.ndarray:
        table = (self.grid.N, self.grid.dN, self.grid.d2N)[deriv]
        return self.grid.cell_dofs(self.dofs) @ table.T

    def evaluate(self, s, deriv: int = 0) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        g = self.grid
        cell = np.clip(np.floor(s / g.h).astype(int), 0, g.n_cells - 1)
        xi = s / g.h - cell
        tables = _hermite_tables(xi, g.h)[deriv]
        local = g.cell_dofs(self.dofs)[cell]
        return np.sum(tables * local, axis=-1)

    def __add__(self, other):
        if isinstance(other, FieldState):
            return FieldState(self.grid, self.dofs + other.dofs)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, FieldState):
            return FieldState(self.grid, self.dofs - other.dofs)
        return NotImplemented

    def __mul__(self, c):
        return FieldState(self.grid, self.dofs * float(c))

    __rmul__ = __mul__


def _scatter_band(grid: Grid, local: np.ndarray) -> np.ndarray:
    """Sum (n_cells, 4, 4) element matrices into lower band storage."""
    ab = np.zeros((BANDWIDTH + 1, grid.ndof))
    base = 2 * np.arange(grid.n_cells)
    for a in range(4):
        for b in range(a + 1):
            ab[a - b, base + b] += local[:, a, b]
    return ab


def band_to_dense(ab: np.ndarray) -> np.ndarray:
    n = ab.shape[1]
    A = np.diag(ab[0])
    for d in range(1, ab.shape[0]):
        A += np.diag(ab[d, : n - d], -d) + np.diag(ab[d, : n - d], d)
    return A


def mass_band(grid: Grid, weight_g=1.0) -> np.ndarray:
    """Band matrix of int w u v, with w sampled at Gauss points."""
    w = grid.sample(weight_g).reshape(grid.n_cells, GAUSS_POINTS) * grid.weights
    local = np.einsum("cq,qa,qb->cab", w, grid.N, grid.N)
    return _scatter_band(grid, local)


def stiffness_band(grid: Grid, weight_g=1.0) -> np.ndarray:
    """Band matrix of int w u' v'."""
    w = grid.sample(weight_g).reshape(grid.n_cells, GAUSS_POINTS) * grid.weights
    local = np.einsum("cq,qa,qb->cab", w, grid.dN, grid.dN)
    return _scatter_band(grid, local)


def bending_band(grid: Grid) -> np.ndarray:
    """Band matrix of int u'' v''.

    Uses the closed-form beam element so that constants are annihilated exactly;
    the quadrature version leaves O(u / h^3) row sums, which leak mass every step.
    """
    h = grid.h
    local = np.array([[12.0, 6 * h, -12.0, 6 * h],
                      [6 * h, 4 * h * h, -6 * h, 2 * h * h],
                      [-12.0, -6 * h, 12.0, -6 * h],
                      [6 * h, 2 * h * h, -6 * h, 4 * h * h]]) / h**3
    return _scatter_band(grid, np.broadcast_to(local, (grid.n_cells, 4, 4)))


@dataclass(eq=False)
class AssembledForms:
    grid: Grid
    weight: np.ndarray            # Gauss-point samples of the mass weight
    M: np.ndarray                 # weighted mass (band)
    B: np.ndarray                 # bending form (band)
    gram: np.ndarray              # H2 Gram matrix (band)
    M1: np.ndarray | None = None  # optional second weighted mass
    weight1: np.ndarray | None = None
    _factors: dict = field(default_factory=dict, repr=False)

    def operator(self, eps: float) -> np.ndarray:
        return self.M + eps * self.B

    def factor(self, eps: float) -> np.ndarray:
        fac = self._factors.get(eps)
        if fac is None:
            try:
                fac = kernels.band_cholesky(np.ascontiguousarray(self.operator(eps)))
            except np.linalg.LinAlgError as exc:
                raise SingularSystemError(f"resolvent operator not positive definite at eps={eps}: {exc}") from exc
            self._factors[eps] = fac
        return fac


def gram_band(grid: Grid) -> np.ndarray:
    return mass_band(grid) + stiffness_band(grid) + bending_band(grid)


def assemble(grid: Grid, weight=1.0, weight1=None) -> AssembledForms:
    """Weighted mass and bending forms; the weight must be bounded below by a positive constant."""
    w = grid.sample(weight)
    if not np.all(np.isfinite(w)) or w.min() <= 0.0:
        raise ConfigurationError(
            f"mass weight must satisfy 0 < k1 <= k(s) <= k2; min sampled value is {w.min():.3e}")
    w1 = None if weight1 is None else grid.sample(weight1)
    M1 = None if w1 is None else mass_band(grid, w1)
    return AssembledForms(grid=grid, weight=w, M=mass_band(grid, w), B=bending_band(grid),
                          gram=gram_band(grid), M1=M1, weight1=w1)


def band_matvec(ab, x) -> np.ndarray:
    return kernels.band_matvec(np.ascontiguousarray(ab), np.ascontiguousarray(x, dtype=float))


def nonlinear_form(z: FieldState) -> np.ndarray:
    """Dual vector with entries int F'(z') v_i' (F' evaluated at Gauss points)."""
    g = z.grid
    return kernels.nonlinear_load(z.dofs, g.n_cells, np.ascontiguousarray(g.dN), np.ascontiguousarray(g.weights))


def nonlinear_jacobian_band(z: FieldState) -> np.ndarray:
    """Band matrix of int F''(z') u' v'."""
    return stiffness_band(z.grid, d2F(z.gauss(1)).ravel())


def load_vector(grid: Grid, g_values, f_values=None, eps: float = 0.0) -> np.ndarray:
    """Right-hand side int g v - eps int f v' from Gauss-point samples."""
    w = grid.gauss_weights
    rhs = _eval_matrix_t(grid, 0) @ (w * grid.sample(g_values))
    if f_values is not None and eps != 0.0:
        rhs -= eps * (_eval_matrix_t(grid, 1) @ (w * grid.sample(f_values)))
    return rhs


def resolvent_solve(forms: AssembledForms, eps: float, f=None, g=None) -> FieldState:
    """Weak solution u of k u + eps u'''' = eps f' + g with u'' = 0, u''' = f on the boundary.

    ``f`` and ``g`` may be scalars, callables of s or Gauss-point arrays; ``None`` means zero.
    """
    if not eps > 0:
        raise ConfigurationError(f"eps must be > 0, got {eps}")
    grid = forms.grid
    rhs = load_vector(grid, 0.0 if g is None else g, f, eps)
    u = kernels.band_solve(forms.factor(eps), rhs)
    return FieldState(grid, u)


def norms(z: FieldState) -> dict:
    g = z.grid
    v0, v1, v2 = z.gauss(0), z.gauss(1), z.gauss(2)
    w = g.weights
    l2 = float(np.sqrt(np.sum(w * v0**2)))
    h1 = float(np.sqrt(np.sum(w * v1**2)))
    h2 = float(np.sqrt(np.sum(w * v2**2)))
    linf = float(max(np.abs(v0).max(), np.abs(z.values).max()))
    d1 = float(max(np.abs(v1).max(), np.abs(z.slopes).max()))
    return {"l2": l2, "h1_semi": h1, "h2_semi": h2, "h2": float(np.sqrt(l2**2 + h1**2 + h2**2)),
            "linf": linf, "w1inf": max(linf, d1)}


def h2_norm(dofs: np.ndarray, gram: np.ndarray) -> float:
    return float(np.sqrt(abs(dofs @ band_matvec(gram, dofs))))


def weak_residual(z: FieldState) -> np.ndarray:
    """Entries int z'' v_i'' + F'(z') v_i' of the stationary weak form.

    Accumulated in extended precision: z'' costs O(1/h^2) cancellation, which
    would otherwise put a roundoff floor above the truncation error on fine grids.
    """
    g = z.grid
    ld = np.longdouble
    local = g.cell_dofs(z.dofs).astype(ld)
    d1 = local @ g.dN.T.astype(ld)
    d2 = local @ g.d2N.T.astype(ld)
    w = g.weights.astype(ld)
    contrib = (w * d2) @ g.d2N.astype(ld) + (w * 4 * d1 * (d1 * d1 - 1)) @ g.dN.astype(ld)
    out = np.zeros(g.ndof, dtype=ld)
    out[: 2 * g.n_cells] += contrib[:, :2].ravel()
    out[2:] += contrib[:, 2:].ravel()
    return out.astype(float)


def dual_norm(residual: np.ndarray, grid: Grid) -> float:
    """H2-dual norm sqrt(r^T G^{-1} r) of a residual functional."""
    G = gram_band(grid)
    y = kernels.band_solve(kernels.band_cholesky(np.ascontiguousarray(G)), residual)
    return float(np.sqrt(abs(residual @ y)))


def second_derivative_at_nodes(z: FieldState) -> np.ndarray:
    """Nodal z'' averaged from the two adjacent cells (one-sided at the ends)."""
    g = z.grid
    local = g.cell_dofs(z.dofs)
    _, _, left = _hermite_tables(np.array([0.0]), g.h)
    _, _, right = _hermite_tables(np.array([1.0]), g.h)
    at_start = local @ left[0]
    at_end = local @ right[0]
    out = np.empty(g.n_cells + 1)
    out[0] = at_start[0]
    out[-1] = at_end[-1]
    out[1:-1] = 0.5 * (at_end[:-1] + at_start[1:])
    return out


def write_snapshot(path, z: FieldState) -> None:
    """CSV with columns s, z, z', z'' (one row per node)."""
    zpp = second_derivative_at_nodes(z)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "z", "dz", "d2z"])
        for row in zip(z.grid.nodes, z.values, z.slopes, zpp):
            w.writerow([f"{v:.17g}" for v in row])


def read_snapshot(path, grid: Grid) -> FieldState:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] != grid.n_cells + 1 or not np.allclose(data[:, 0], grid.nodes, rtol=0, atol=1e-12 * grid.L):
        raise ConfigurationError(f"snapshot {path} does not match a grid with {grid.n_cells} cells on (0, {grid.L})")
    dofs = np.empty(grid.ndof)
    dofs[0::2] = data[:, 1]
    dofs[1::2] = data[:, 2]
    return FieldState(grid, dofs)
