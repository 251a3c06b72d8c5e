"""Time marching for the delayed flow (Picard per step) and for the eps = 0 limit (Newton per step)."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from . import steady_states as ss
from ._backend import kernels
from .delay import History, PastData
from .kernel import KernelSpec, moments
from .spatial import (ConfigurationError, FieldState, Grid, F, assemble, band_matvec, gram_band, h2_norm,
                      load_vector, make_grid, mass_band, nonlinear_form, nonlinear_jacobian_band)

log = logging.getLogger(__name__)

RELAX_SCHEDULE = (1.0, 0.5, 0.25)


class FixedPointFailure(RuntimeError):
    def __init__(self, t: float, ratio: float, iterations: int, trajectory=None):
        super().__init__(f"Picard iteration did not converge at t = {t:.6g} after {iterations} iterations "
                         f"(last contraction ratio {ratio:.3g}); eps or dt too large for the fixed-point map")
        self.t, self.ratio, self.iterations, self.trajectory = t, ratio, iterations, trajectory


class StepFailure(RuntimeError):
    def __init__(self, t: float, residuals: list, trajectory=None):
        super().__init__(f"Newton stagnated at t = {t:.6g}; residual history "
                         + ", ".join(f"{r:.3e}" for r in residuals))
        self.t, self.residuals, self.trajectory = t, residuals, trajectory


class AmbiguousStabilization(RuntimeError):
    pass


@dataclass
class RunConfig:
    L: float
    n_cells: int
    kernel: KernelSpec
    past: PastData
    eps: float
    t_end: float
    dt: float | None = None            # default eps/20 (delayed) or 1e-3 (limit)
    fp_tol: float = 1e-10
    fp_maxit: int = 300
    fp_relax: str | float = "auto"
    newton_tol: float = 1e-11
    newton_maxit: int = 30
    limit_scheme: str = "newton"       # or "semi-implicit"
    output_every: int = 1
    snapshot_every: int = 0            # 0: no snapshot files
    detect: bool = True
    stab_tol: float = 1e-6
    branch_tol: float = 1e-4
    stab_window: int = 20
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.eps < 0:
            raise ConfigurationError("run.eps must be >= 0")
        if self.dt is None:
            self.dt = self.eps / 20.0 if self.eps > 0 else 1e-3
        if not self.dt > 0:
            raise ConfigurationError("run.dt must be > 0")
        if not self.t_end >= 0:
            raise ConfigurationError("run.t_end must be >= 0")
        for name in ("fp_tol", "newton_tol"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigurationError(f"run.{name} must lie in (0, 1), got {v}")
        if self.limit_scheme not in ("newton", "semi-implicit"):
            raise ConfigurationError(f"run.limit_scheme must be 'newton' or 'semi-implicit', got {self.limit_scheme!r}")
        if self.output_every < 1:
            raise ConfigurationError("outputs.every must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class StepResult:
    z: FieldState
    iterations: int
    contraction: float
    relax: float = 1.0
    residual: float = 0.0


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    series: list = field(default_factory=list)        # diagnostics rows (dicts)
    status: str = "ReachedTEnd"
    matched: ss.SteadyField | None = None
    kappa: float = math.nan
    jump: float = math.nan
    failure: str = ""
    eps: float = 0.0
    snapshots: list = field(default_factory=list)    # (t, FieldState) at snapshot cadence

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.series])

    @property
    def final(self) -> FieldState:
        return self.states[-1]


def _energy_local(z: FieldState) -> float:
    g = z.grid
    return float(np.sum(g.weights * (0.5 * z.gauss(2) ** 2 + F(z.gauss(1)))))


# --------------------------------------------------------------------------- stabilization

class StabilizationMonitor:
    """Online version of :func:`detect_stabilization` fed one output state at a time."""

    def __init__(self, candidates: list, gram: np.ndarray, dt_out: float, stab_tol: float,
                 branch_tol: float, window: int):
        self.candidates, self.gram, self.dt_out = candidates, gram, dt_out
        self.stab_tol, self.branch_tol, self.window = stab_tol, branch_tol, window
        self.speeds = deque(maxlen=window)
        self.dists = [deque(maxlen=window) for _ in candidates]
        self.prev = None

    def feed(self, z: FieldState) -> ss.SteadyField | None:
        if self.prev is not None:
            d = (z.dofs - self.prev.dofs) / self.dt_out
            g = z.grid
            self.speeds.append(float(np.sqrt(np.sum(g.weights * FieldState(g, d).gauss(0) ** 2))))
        self.prev = z
        for c, dq in zip(self.candidates, self.dists):
            dq.append(h2_norm(z.dofs - c.values.dofs, self.gram))
        if len(self.speeds) < self.window or max(self.speeds) >= self.stab_tol:
            return None
        return _match(self.candidates, self.dists, self.branch_tol, self.window)


# distance changes below this are roundoff, not growth
DIST_NOISE = 1e-10


def _match(candidates, dists, tol, window):
    hits = []
    for c, dq in zip(candidates, dists):
        if len(dq) < window or dq[-1] >= tol:
            continue
        seq = np.array(dq)
        if np.all(np.diff(seq) <= DIST_NOISE + 1e-12 * seq[:-1]):
            hits.append(c)
    if len(hits) > 1:
        raise AmbiguousStabilization(
            f"terminal state within {tol:g} of branches {[h.branch.id for h in hits]}; refine grid or tighten tol")
    return hits[0] if hits else None


def detect_stabilization(traj: Trajectory, branches: list, tol: float = 1e-4, window: int = 20,
                         stab_tol: float | None = None) -> ss.SteadyField | None:
    """The steady field the trajectory has settled on, if any.

    A branch matches when its H2 distance to the last state is below ``tol`` and
    has not increased over the last ``window`` output states.
    """
    if not traj.states:
        return None
    grid = traj.states[-1].grid
    gram = gram_band(grid)
    tail = traj.states[-window:]
    if stab_tol is not None and len(traj.times) >= 2:
        dt_out = traj.times[-1] - traj.times[-2]
        for a, b in zip(tail[:-1], tail[1:]):
            d = FieldState(grid, (b.dofs - a.dofs) / dt_out)
            if np.sqrt(np.sum(grid.weights * d.gauss(0) ** 2)) >= stab_tol:
                return None
    dists = [deque((h2_norm(z.dofs - c.values.dofs, gram) for z in tail), maxlen=window) for c in branches]
    return _match(branches, dists, tol, min(window, len(tail)))


def steady_candidates(grid: Grid, mu1_g: np.ndarray, K: float) -> list:
    """All steady branches on the grid, constant chosen by (Z, mu1) = K, polished to discrete fixed points."""
    try:
        branches = ss.enumerate_branches(grid.L)
    except ss.DegenerateLengthError:
        return []
    out = []
    for br in branches:
        Z = ss.select_constant(br, mu1_g, K, grid, res_tol=math.inf)
        out.append(ss.polish(Z, mu1_g, K))
    return out


# --------------------------------------------------------------------------- delayed problem

def _relax_schedule(cfg) -> tuple:
    if cfg is None or cfg.fp_relax == "auto":
        return RELAX_SCHEDULE
    return (float(cfg.fp_relax),)


def _restore_mean(grid, z: np.ndarray, w_eff: np.ndarray, g_known: np.ndarray) -> np.ndarray:
    """Shift z by a constant so the v = 1 test of the step holds to rounding.

    Bending and nonlinear forms annihilate constants, so int (mu - W0) z = int g_known
    exactly; the banded solve only meets it to ~ eps |B| u, which otherwise leaks
    into Theta at O(u / h^3) per run.
    """
    vals = (grid.cell_dofs(z) @ grid.N.T).ravel()
    c = grid.integrate(g_known - w_eff * vals) / grid.integrate(w_eff)
    out = z.copy()
    out[0::2] += c
    return out


def step_delayed(h: History, forms, k: KernelSpec | None = None, eps: float | None = None,
                 t_next: float | None = None, cfg: RunConfig | None = None, z0: FieldState | None = None) -> StepResult:
    """One level of the delayed scheme by Picard iteration on the resolvent form.

    z <- A_eps(F'(z'), g(z)), where g is the delayed source with the newest
    sub-interval weight placed on the current iterate. The history is not modified.
    """
    grid = h.grid
    eps = h.eps if eps is None else eps
    if t_next is not None and abs(t_next - h.count * h.dt) > 1e-9 * max(1.0, h.dt):
        raise ConfigurationError(f"history expects t = {h.count * h.dt}, got {t_next}")
    fp_tol = cfg.fp_tol if cfg else 1e-10
    maxit = cfg.fp_maxit if cfg else 300
    weight, g_known = h.known_source()
    rhs = load_vector(grid, g_known)
    if not hasattr(h, "_mc_band"):
        h._mc_band = {}
    key = bool(np.any(weight))
    mc = h._mc_band.get(key)
    if mc is None:
        mc = np.ascontiguousarray(mass_band(grid, weight)) if key else np.zeros((1, grid.ndof))
        h._mc_band[key] = mc
    chol = forms.factor(eps)
    if z0 is None:
        z0 = h.latest if h.latest is not None else h.past.state(grid, 0.0)
    dN = np.ascontiguousarray(grid.dN)
    gw = np.ascontiguousarray(grid.weights)
    ratio, it = math.nan, 0
    for relax in _relax_schedule(cfg):
        z, it, ratio, ok = kernels.picard_solve(chol, mc, rhs, forms.gram, eps, z0.dofs, grid.n_cells,
                                                dN, gw, fp_tol, maxit, relax)
        if ok and np.all(np.isfinite(z)):
            z = _restore_mean(grid, z, h.mu_quad - weight, g_known)
            res = band_matvec(forms.operator(eps), z) - band_matvec(mc, z) - rhs + eps * nonlinear_form(FieldState(grid, z))
            return StepResult(FieldState(grid, z), it, ratio, relax, float(np.linalg.norm(res)))
        log.info("Picard with relaxation %.3g failed at t=%.6g (ratio %.3g)", relax, h.count * h.dt, ratio)
    raise FixedPointFailure(h.count * h.dt, ratio, it)


def _build_delayed(cfg: RunConfig):
    grid = make_grid(cfg.L, cfg.n_cells)
    h = History(grid, cfg.kernel, cfg.past, cfg.eps, cfg.dt)
    forms = assemble(grid, h.mu_quad)
    return grid, h, forms


def run_delayed(cfg: RunConfig, history: History | None = None, candidates: list | None = None) -> Trajectory:
    """March t = 0+, dt, 2 dt, ... to t_end or until a steady branch is reached."""
    if not cfg.eps > 0:
        raise ConfigurationError("run_delayed needs eps > 0; use run_limit for eps = 0")
    if history is None:
        grid, h, forms = _build_delayed(cfg)
    else:
        h, grid = history, history.grid
        forms = assemble(grid, h.mu_quad)
    traj = Trajectory(kappa=h.kappa, eps=cfg.eps)
    z_past0 = h.past.state(grid, 0.0)
    monitor = None
    if cfg.detect:
        if candidates is None:
            candidates = steady_candidates(grid, h.mu1_quad, h.kappa)
        if candidates:
            monitor = StabilizationMonitor(candidates, forms.gram, cfg.dt * cfg.output_every, cfg.stab_tol,
                                           cfg.branch_tol, cfg.stab_window)
    z_prev = None
    for n in range(cfg.n_steps + 1):
        t = n * cfg.dt
        try:
            step = step_delayed(h, forms, cfg=cfg)
        except FixedPointFailure as exc:
            traj.status = "FixedPointFailure"
            traj.failure = str(exc)
            exc.trajectory = traj
            raise
        h.push(step.z)
        if n == 0:
            d = step.z - z_past0
            traj.jump = float(np.sqrt(np.sum(grid.weights * d.gauss(0) ** 2)))
        last = n == cfg.n_steps
        if n % cfg.output_every == 0 or last:
            dE = h.delay_energy()
            traj.times.append(t)
            traj.states.append(step.z)
            traj.series.append({
                "t": t, "E": dE + _energy_local(step.z), "delay_E": dE, "diss_rate": h.dissipation(),
                "theta": h.theta(), "mu1_inner": h.mu1_inner(), "fp_iters": step.iterations,
                "contraction": step.contraction})
            if cfg.snapshot_every and (len(traj.times) - 1) % cfg.snapshot_every == 0:
                traj.snapshots.append((t, step.z))
            if monitor is not None:
                hit = monitor.feed(step.z)
                if hit is not None:
                    traj.status, traj.matched = "Stabilized", hit
                    break
        z_prev = step.z
    del z_prev
    return traj


# --------------------------------------------------------------------------- limit problem

def _solve_sym_band(ab: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Cholesky when positive definite, banded LU otherwise."""
    try:
        return kernels.band_solve(kernels.band_cholesky(np.ascontiguousarray(ab)), rhs)
    except np.linalg.LinAlgError:
        p = ab.shape[0] - 1
        n = ab.shape[1]
        full = np.zeros((2 * p + 1, n))
        for d in range(p + 1):
            full[p + d, : n - d] = ab[d, : n - d]
            full[p - d, d:] = ab[d, : n - d]
        return solve_banded((p, p), full, rhs)


def step_limit(z: FieldState, forms, dt: float, cfg: RunConfig | None = None) -> StepResult:
    """Backward Euler for b z_t + z'''' = (F'(z'))' with the natural boundary conditions.

    ``forms.M1`` (or ``forms.M``) carries the weight b. Newton uses the exact
    Jacobian and halves the update until the residual decreases.
    """
    grid = z.grid
    M = forms.M1 if forms.M1 is not None else forms.M
    tol = cfg.newton_tol if cfg else 1e-11
    maxit = cfg.newton_maxit if cfg else 30
    scheme = cfg.limit_scheme if cfg else "newton"
    A = np.ascontiguousarray(M / dt + forms.B)
    Mz = band_matvec(M, z.dofs) / dt
    bw = forms.weight1 if forms.M1 is not None else forms.weight
    zg = z.gauss(0).ravel()
    if scheme == "semi-implicit":
        znew = _solve_sym_band(A, Mz - nonlinear_form(z))
        return StepResult(FieldState(grid, _restore_mean(grid, znew, bw, bw * zg)), 1, math.nan)

    def resid(x):
        return band_matvec(A, x) - Mz + nonlinear_form(FieldState(grid, x))

    x = z.dofs.copy()
    r = resid(x)
    rn = [float(np.linalg.norm(r))]
    prev_step = None
    ratio = math.nan
    for it in range(1, maxit + 1):
        J = A + nonlinear_jacobian_band(FieldState(grid, x))
        delta = _solve_sym_band(J, -r)
        lam = 1.0
        for _ in range(30):
            xt = x + lam * delta
            rt = resid(xt)
            if np.linalg.norm(rt) < rn[-1] or rn[-1] == 0.0:
                break
            lam *= 0.5
        x, r = xt, rt
        rn.append(float(np.linalg.norm(r)))
        step = h2_norm(lam * delta, forms.gram)
        if prev_step:
            ratio = step / prev_step
        prev_step = step
        if step <= tol * (1.0 + h2_norm(x, forms.gram)):
            # (z, b) is conserved exactly by the scheme; remove the solver's share of drift
            x = _restore_mean(grid, x, bw, bw * zg)
            return StepResult(FieldState(grid, x), it, ratio, lam, rn[-1])
    raise StepFailure(math.nan, rn)


def run_limit(cfg: RunConfig) -> Trajectory:
    """Backward-Euler trajectory of the eps = 0 problem with weight b = mu1."""
    grid = make_grid(cfg.L, cfg.n_cells)
    mu1 = grid.sample(moments(cfg.kernel).mu1)
    forms = assemble(grid, mu1, weight1=mu1)
    z = cfg.past.state(grid, 0.0)
    K0 = float(np.sum(grid.gauss_weights * z.gauss(0).ravel() * mu1))
    traj = Trajectory(kappa=K0, eps=0.0, jump=0.0)
    monitor = None
    if cfg.detect:
        cands = steady_candidates(grid, mu1, K0)
        if cands:
            monitor = StabilizationMonitor(cands, forms.gram, cfg.dt * cfg.output_every, cfg.stab_tol,
                                           cfg.branch_tol, cfg.stab_window)

    def record(t, zf, iters, ratio, rate):
        traj.times.append(t)
        traj.states.append(zf)
        inner = float(np.sum(grid.gauss_weights * zf.gauss(0).ravel() * mu1))
        traj.series.append({"t": t, "E": _energy_local(zf), "delay_E": 0.0, "diss_rate": rate,
                            "theta": inner, "mu1_inner": inner, "fp_iters": iters, "contraction": ratio})
        if cfg.snapshot_every and (len(traj.times) - 1) % cfg.snapshot_every == 0:
            traj.snapshots.append((t, zf))
        return monitor.feed(zf) if monitor is not None else None

    cum = 0.0
    hit = record(0.0, z, 0, math.nan, 0.0)
    traj.series[-1]["cum_diss"] = 0.0
    for n in range(1, cfg.n_steps + 1):
        t = n * cfg.dt
        try:
            step = step_limit(z, forms, cfg.dt, cfg)
        except StepFailure as exc:
            exc.t = t
            traj.status, traj.failure = "StepFailure", str(exc)
            exc.trajectory = traj
            raise
        rate_vals = FieldState(grid, (step.z.dofs - z.dofs) / cfg.dt).gauss(0).ravel()
        rate = -float(np.sum(grid.gauss_weights * mu1 * rate_vals**2))
        cum += cfg.dt * rate
        z = step.z
        if n % cfg.output_every == 0 or n == cfg.n_steps:
            hit = record(t, z, step.iterations, step.contraction, rate)
            traj.series[-1]["cum_diss"] = cum
            if hit is not None:
                traj.status, traj.matched = "Stabilized", hit
                break
    return traj
