"""Steady states of the penalised beam: the atlas of w = z' solving w'' = F'(w), w'(0) = w'(L) = 0.

Constants w in {-1, 0, 1} always solve; for L > pi/2 each mode n <= floor(2L/pi)
contributes the pair of elliptic profiles +-a_n sn(chi s + K, k) with half period L/n.
The field z is recovered as z(s) = int_0^s w + c.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import elliptic
from .spatial import (ConfigurationError, FieldState, Grid, F, band_matvec, bending_band,
                      dual_norm, h2_norm, gram_band, load_vector, nonlinear_form,
                      nonlinear_jacobian_band, band_to_dense, weak_residual)

DEGENERACY_TOL = 1e-12
RES_TOL = 1e-3


class DegenerateLengthError(ConfigurationError):
    pass


class SteadyConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class SteadyBranch:
    kind: str             # "constant" or "elliptic"
    L: float
    value: int = 0        # w for constant branches
    n: int = 0            # mode for elliptic branches
    a: float = 0.0
    sign: int = 1

    @property
    def id(self) -> str:
        if self.kind == "constant":
            return {0: "w0", 1: "w+1", -1: "w-1"}[self.value]
        return f"n{self.n}{'+' if self.sign > 0 else '-'}"

    @property
    def affine(self) -> bool:
        return self.kind == "constant"

    @property
    def half_period(self) -> float:
        return elliptic.half_period(self.a) if self.kind == "elliptic" else math.nan


def mode_count(L: float) -> int:
    return int(math.floor(2.0 * L / math.pi))


def enumerate_branches(L: float) -> list:
    """All steady branches for length L: three constants, then +-w_n for n = 1..floor(2L/pi)."""
    L = float(L)
    if not L > 0:
        raise ConfigurationError(f"L must be > 0, got {L}")
    m = mode_count(L)
    for n in range(1, m + 2):
        if abs(L / n - math.pi / 2) < DEGENERACY_TOL:
            raise DegenerateLengthError(
                f"L/{n} = pi/2: degenerate length, no nonconstant solution with this mode")
    out = [SteadyBranch("constant", L, value=v) for v in (0, 1, -1)]
    for n in range(1, m + 1):
        a = elliptic.invert_half_period(L / n)
        out.append(SteadyBranch("elliptic", L, n=n, a=a, sign=1))
        out.append(SteadyBranch("elliptic", L, n=n, a=a, sign=-1))
    return out


def eval_w(branch: SteadyBranch, s):
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < -1e-14 * branch.L) or np.any(s_arr > branch.L * (1 + 1e-14)):
        raise ConfigurationError(f"s must lie in [0, {branch.L}]")
    if branch.kind == "constant":
        out = np.full(s_arr.shape, float(branch.value))
    else:
        out = np.asarray(elliptic.shooting_profile(branch.a, s_arr, branch.sign))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class SteadyField:
    branch: SteadyBranch
    c: float
    values: FieldState
    residual: float = 0.0

    @property
    def grid(self) -> Grid:
        return self.values.grid


def _primitive_at_nodes(branch: SteadyBranch, grid: Grid) -> np.ndarray:
    """int_0^{s_i} w by 5-point Gauss per cell on the closed form."""
    if branch.kind == "constant":
        return branch.value * grid.nodes
    wq = eval_w(branch, np.clip(grid.points, 0.0, grid.L))
    cell = wq @ (grid.weights)
    return np.concatenate([[0.0], np.cumsum(cell)])


def _residual_scale(z: FieldState) -> float:
    return dual_norm(weak_residual(z), z.grid) / (1.0 + h2_norm(z.dofs, gram_band(z.grid)))


def build_field(branch: SteadyBranch, c: float, grid: Grid, res_tol: float = RES_TOL) -> SteadyField:
    """Z = int_0^s w + c in Hermite form, with the scaled weak residual checked."""
    if abs(grid.L - branch.L) > 1e-12 * max(1.0, branch.L):
        raise ConfigurationError(f"grid length {grid.L} does not match branch length {branch.L}")
    dofs = np.empty(grid.ndof)
    dofs[0::2] = _primitive_at_nodes(branch, grid) + c
    dofs[1::2] = eval_w(branch, grid.nodes)
    z = FieldState(grid, dofs)
    res = _residual_scale(z)
    if res > res_tol:
        raise SteadyConsistencyError(
            f"steady field {branch.id} has scaled weak residual {res:.3e} > {res_tol:.1e}; refine the grid")
    return SteadyField(branch, float(c), z, res)


def mechanical_energy(Z) -> float:
    """1/2 int (Z'')^2 + int F(Z')."""
    z = Z.values if isinstance(Z, SteadyField) else Z
    g = z.grid
    return float(np.sum(g.weights * (0.5 * z.gauss(2) ** 2 + F(z.gauss(1)))))


def inner(z: FieldState, weight) -> float:
    g = z.grid
    return float(np.sum(g.gauss_weights * z.gauss(0).ravel() * g.sample(weight)))


def select_constant(branch: SteadyBranch, mu1, K: float, grid: Grid, res_tol: float = RES_TOL) -> SteadyField:
    """The member of the branch with (Z, mu1) = K."""
    base = build_field(branch, 0.0, grid, res_tol)
    total = grid.integrate(grid.sample(mu1))
    if not total > 0:
        raise ConfigurationError("int mu1 ds must be > 0")
    c = (K - inner(base.values, mu1)) / total
    return SteadyField(branch, c, FieldState.constant(grid, c) + base.values, base.residual)


def polish(Z: SteadyField, mu1, K: float, tol: float = 1e-13, maxit: int = 30) -> SteadyField:
    """Newton-project Z onto the exact discrete steady state with (Z, mu1) = K.

    The Hermite interpolant of the closed form leaves an O(h^2) residual; the
    time steppers need the discrete fixed point itself. The constant mode is
    fixed by bordering with the constraint.
    """
    grid = Z.grid
    if Z.branch.affine:
        # affine fields are represented exactly by Hermite cubics
        return Z
    c_vec = load_vector(grid, grid.sample(mu1))
    Bd = band_to_dense(bending_band(grid))
    z = Z.values.dofs.copy()
    n = grid.ndof
    for _ in range(maxit):
        zf = FieldState(grid, z)
        r = Bd @ z + nonlinear_form(zf)
        g = K - c_vec @ z
        A = np.zeros((n + 1, n + 1))
        A[:n, :n] = Bd + band_to_dense(nonlinear_jacobian_band(zf))
        A[:n, n] = c_vec
        A[n, :n] = c_vec
        sol = np.linalg.solve(A, np.concatenate([-r, [g]]))
        z += sol[:n]
        if np.linalg.norm(sol[:n]) <= tol * (1.0 + np.linalg.norm(z)):
            break
    zf = FieldState(grid, z)
    return SteadyField(Z.branch, Z.c, zf, _residual_scale(zf))


def steady_table(L: float, grid: Grid, mu1=1.0, K: float = 0.0) -> list:
    rows = []
    for br in enumerate_branches(L):
        Z = select_constant(br, mu1, K, grid)
        rows.append({"branch": br.id, "kind": br.kind, "n": br.n, "a": br.a if br.kind == "elliptic" else math.nan,
                     "half_period": br.half_period, "energy": mechanical_energy(Z), "c": Z.c,
                     "inner_mu1": inner(Z.values, mu1)})
    return rows


TABLE_COLUMNS = ["branch", "kind", "n", "a", "half_period", "energy", "c", "inner_mu1"]


def write_table(path, rows: list) -> None:
    cols = TABLE_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([f"{r[c]:.17g}" if isinstance(r[c], float) else r[c] for c in cols])
