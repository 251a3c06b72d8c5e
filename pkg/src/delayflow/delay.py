"""History of the solution and every time-nonlocal quantity built from it.

Time levels are t_n = n dt with z_0 = z(0+). Between levels the history is
piecewise linear in t; before t = 0 it is the prescribed past z_p. An age
integral int_0^a_max q(t_n - eps a) w(a) da is split into intervals of width
hh = dt/eps. On interval k the state is (1 - th) z_{n-k} + th z_{n-k-1}, so only
the moments int th^j w da (j = 0, 1, 2) of each interval enter. They are
computed once with 8-point Gauss-Legendre per interval. Every functional below
(source, Theta, energy, dissipation) is a contraction of these tables against
the stored states, so one quadrature serves them all consistently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._backend import kernels
from .kernel import KernelSpec, PastDataError
from .spatial import ConfigurationError, FieldState, Grid, norms

AGE_NODES = 8
MEMORY_BUDGET = 2 * 1024**3


class HistoryCoverageError(RuntimeError):
    pass


# --------------------------------------------------------------------------- past data

@dataclass(frozen=True, eq=False)
class PastData:
    """Prescribed solution for t <= 0.

    ``kind`` is "constant" (a fixed field) or "analytic" (a callable of (s, t)).
    ``dfunc`` is the s-derivative, needed to build Hermite states.
    """

    kind: str
    func: Callable
    dfunc: Callable | None = None
    field: FieldState | None = field(default=None, repr=False)
    time_dependent: bool = False
    label: str = ""

    def __call__(self, s, t):
        return self.func(np.asarray(s, dtype=float), t)

    def gauss(self, grid: Grid, t: float = 0.0) -> np.ndarray:
        if self.field is not None and not self.time_dependent:
            if self.field.grid is grid:
                return self.field.gauss(0).ravel()
        v = np.broadcast_to(np.asarray(self(grid.gauss_points, t), dtype=float), (grid.n_gauss,))
        if not np.all(np.isfinite(v)):
            raise PastDataError(f"past data undefined at t = {t:.6g}")
        return v.copy()

    def state(self, grid: Grid, t: float = 0.0) -> FieldState:
        if self.field is not None and not self.time_dependent and self.field.grid is grid:
            return self.field
        if self.dfunc is None:
            raise ConfigurationError("past data needs an s-derivative to build a Hermite state")
        return FieldState.from_functions(grid, lambda s: self.func(s, t), lambda s: self.dfunc(s, t))

    def bounds(self, grid: Grid, horizon: float = 1.0, samples: int = 41) -> tuple:
        """R = 1 + sup ||z_p||_H2 and the Lipschitz-in-time sup-norm bound R_hat on [-horizon, 0]."""
        if not self.time_dependent:
            return 1.0 + norms(self.state(grid, 0.0))["h2"], 0.0
        ts = np.linspace(-horizon, 0.0, samples)
        R = 1.0 + max(norms(self.state(grid, t))["h2"] for t in ts)
        d = 1e-6 * max(horizon, 1.0)
        Rh = max(np.max(np.abs(self.gauss(grid, t) - self.gauss(grid, t - d))) / d for t in ts)
        return R, float(Rh)


def constant_past(f, df=None, grid: Grid | None = None, label: str = "constant") -> PastData:
    """Past data frozen in time: a FieldState, or a profile f(s) with derivative df(s)."""
    if isinstance(f, FieldState):
        z = f
        return PastData("constant", lambda s, t: z.evaluate(np.clip(s, 0.0, z.grid.L)),
                        lambda s, t: z.evaluate(np.clip(s, 0.0, z.grid.L), 1), field=z, label=label)
    if callable(f):
        fs = f
    else:
        c = float(f)
        fs = lambda s: np.full(np.shape(s), c)
        df = df or (lambda s: np.zeros(np.shape(s)))
    z = None
    if grid is not None and df is not None:
        z = FieldState.from_functions(grid, fs, df)
    return PastData("constant", lambda s, t: fs(s), (lambda s, t: df(s)) if df else None, field=z, label=label)


def analytic_past(func, dfunc=None, label: str = "analytic") -> PastData:
    """Time-dependent past data z_p(s, t), t <= 0."""
    return PastData("analytic", func, dfunc, time_dependent=True, label=label)


def expression_past(expr: str, L: float, grid: Grid | None = None) -> PastData:
    """Past data from a formula in s, t (and L, pi), e.g. ``"0.5*sin(pi*s/L)"``."""
    import sympy

    s, t = sympy.symbols("s t", real=True)
    try:
        e = sympy.sympify(expr, locals={"s": s, "t": t, "L": sympy.Float(L), "pi": sympy.pi})
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ConfigurationError(f"cannot parse past-data expression {expr!r}: {exc}") from exc
    extra = e.free_symbols - {s, t}
    if extra:
        raise ConfigurationError(f"past-data expression {expr!r} has unknown symbols {sorted(map(str, extra))}")
    f = sympy.lambdify((s, t), e, "numpy")
    df = sympy.lambdify((s, t), sympy.diff(e, s), "numpy")
    fv = lambda x, tt: np.broadcast_to(np.asarray(f(x, tt), dtype=float), np.broadcast(x, tt).shape)
    dfv = lambda x, tt: np.broadcast_to(np.asarray(df(x, tt), dtype=float), np.broadcast(x, tt).shape)
    if t not in e.free_symbols:
        p = PastData("constant", fv, dfv, label=expr)
        if grid is not None:
            p = PastData("constant", fv, dfv, field=FieldState.from_functions(
                grid, lambda x: fv(x, 0.0), lambda x: dfv(x, 0.0)), label=expr)
        return p
    return PastData("analytic", fv, dfv, time_dependent=True, label=expr)


# --------------------------------------------------------------------------- history

@dataclass(frozen=True, eq=False)
class IntervalMoments:
    """Per-interval moments; shape (n_int + 1, X) with a zero pad row.

    X = 1 for separable kernels (multiply by ``profile``), else the Gauss-point count.
    """

    m0: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    profile: np.ndarray

    @property
    def tail0(self) -> np.ndarray:
        """tail0[n] = sum_{k >= n} m0_k."""
        return np.cumsum(self.m0[::-1], axis=0)[::-1]


class History:
    """Double-length ring buffer of Gauss-point states plus the interval moment tables.

    Slot j of :meth:`recent` holds z_{n-j}; ``n`` is the newest level.
    """

    def __init__(self, grid: Grid, kernel: KernelSpec, past: PastData, eps: float, dt: float,
                 age_nodes: int = AGE_NODES, memory_budget: float = MEMORY_BUDGET):
        if not eps > 0:
            raise ConfigurationError(f"history needs eps > 0, got {eps}")
        if not dt > 0:
            raise ConfigurationError(f"dt must be > 0, got {dt}")
        self.grid, self.kernel, self.past = grid, kernel, past
        self.eps, self.dt = float(eps), float(dt)
        self.hh = self.dt / self.eps
        self.n_int = max(1, int(math.ceil(kernel.a_max / self.hh - 1e-12)))
        self.slots = int(math.ceil(self.eps * kernel.a_max / self.dt)) + 2
        ng = grid.n_gauss
        X = 1 if kernel.separable else ng
        need = 8.0 * (2 * self.slots * ng + 9 * (self.n_int + 1) * X
                      + (self.n_int * age_nodes * ng if past.time_dependent else 0))
        if need > memory_budget:
            raise ConfigurationError(
                f"history needs {need / 1e9:.2f} GB for {self.slots} slots "
                f"(eps*a_max/dt = {self.eps * kernel.a_max / self.dt:.3g}); use a larger dt or a smaller a_max")
        self._buf = np.zeros((2 * self.slots, ng))
        self._dofs_last = None
        self.count = 0
        self._build_tables(age_nodes)
        self.kappa = self._theta(0, before_first=True)

    # -- tables -----------------------------------------------------------
    def _build_tables(self, nq: int) -> None:
        k, g = self.kernel, self.grid
        x, w = np.polynomial.legendre.leggauss(nq)
        x = 0.5 * (x + 1.0)
        w = 0.5 * w
        self._x = x
        a = (np.arange(self.n_int)[:, None] + x[None, :]) * self.hh       # (n_int, nq)
        wq = w * self.hh
        s = g.gauss_points
        inside = a <= k.a_max
        if k.separable:
            prof = k.profile(s)
            r = np.where(inside, k.age(a), 0.0)[..., None]
            d = np.where(inside, k.age_deriv(a), 0.0)[..., None]
            p = k.age_tail(np.minimum(a, k.a_max))[..., None]
        else:
            prof = np.ones(s.size)
            r = k.rho(s[None, None, :], a[..., None])
            d = k.drho(s[None, None, :], a[..., None])
            p = k.tail(s[None, None, :], a[..., None])

        def mom(v):
            rows = [np.einsum("q,kqx->kx", wq * x**j, v) for j in range(3)]
            return IntervalMoments(*[np.vstack([m, np.zeros((1, m.shape[1]))]) for m in rows], profile=prof)

        self.rho_m, self.drho_m, self.phi_m = mom(r), mom(d), mom(p)
        # node weights for the past part when the past moves in time
        self._w_rho = wq[None, :, None] * r
        self._w_drho = wq[None, :, None] * d
        self._w_phi = wq[None, :, None] * p
        self.profile = prof
        m = self.rho_m
        self.mu_quad = prof * m.tail0[0]
        ages = (np.arange(self.n_int + 1) * self.hh)[:, None]
        self.mu1_quad = prof * np.sum(ages * m.m0 + self.hh * m.m1, axis=0)
        self.current_weight = prof * (m.m0[0] - m.m1[0])
        self._tails = {id(mm): mm.tail0 for mm in (self.rho_m, self.drho_m, self.phi_m)}
        if self.past.time_dependent:
            # z_p at t_n - eps a = -eps hh (j + x_q) for the j-th interval beyond the forward range
            times = -self.eps * self.hh * (np.arange(self.n_int)[:, None] + x[None, :])
            zp = np.asarray(self.past(s[None, None, :], times[..., None]), dtype=float)
            zp = np.broadcast_to(zp, (self.n_int, nq, s.size))
            if not np.all(np.isfinite(zp)):
                raise PastDataError("past data undefined at some sampled negative time")
            self._zp_table = np.ascontiguousarray(zp)
            self._zp0 = None
        else:
            self._zp_table = None
            self._zp0 = self.past.gauss(g, 0.0)

    # -- buffer -----------------------------------------------------------
    @property
    def n(self) -> int:
        """Index of the newest stored level (-1 when empty)."""
        return self.count - 1

    @property
    def t(self) -> float:
        return self.n * self.dt if self.count else 0.0

    def push(self, z: FieldState) -> None:
        p = self.slots - 1 - (self.count % self.slots)
        vals = z.gauss(0).ravel()
        self._buf[p] = vals
        self._buf[p + self.slots] = vals
        self._dofs_last = z
        self.count += 1

    @property
    def latest(self) -> FieldState | None:
        return self._dofs_last

    def recent(self, j: int) -> np.ndarray:
        """(j, n_gauss) view of z_n, z_{n-1}, ..., z_{n-j+1}."""
        if j > min(self.count, self.slots):
            raise HistoryCoverageError(f"requested {j} levels, only {min(self.count, self.slots)} retained")
        p = self.slots - 1 - ((self.count - 1) % self.slots)
        return self._buf[p:p + j]

    def values_at(self, t: float) -> np.ndarray:
        """Gauss-point values at any t <= current time (linear between levels, past for t < 0)."""
        if t < 0:
            return self.past.gauss(self.grid, t)
        if self.count == 0 or t > self.t + 1e-12 * max(1.0, self.t):
            raise HistoryCoverageError(f"t = {t} is ahead of the history (t_n = {self.t})")
        back = (self.t - t) / self.dt
        j = int(math.floor(back + 1e-12))
        th = max(back - j, 0.0)
        if j >= self.n:
            j, th = self.n, 0.0
        need = j + (2 if th > 1e-12 else 1)
        if need > min(self.count, self.slots):
            raise HistoryCoverageError(f"t = {t} fell out of the retention window")
        z = self.recent(need)
        return z[j].copy() if need == j + 1 else (1 - th) * z[j] + th * z[j + 1]

    # -- contractions -------------------------------------------------------
    @staticmethod
    def _apply(coef: np.ndarray, states: np.ndarray) -> np.ndarray:
        if coef.shape[1] == 1:
            return coef[:, 0] @ states
        return np.einsum("jg,jg->g", coef, states)

    def _forward_coef(self, mm: IntervalMoments, n: int) -> np.ndarray:
        """Coefficients of z_n, ..., z_{n-K} with K = min(n, n_int) forward intervals."""
        K = min(n, self.n_int)
        coef = np.zeros((K + 1, mm.m0.shape[1]))
        coef[:K] = mm.m0[:K] - mm.m1[:K]
        coef[1:K + 1] += mm.m1[:K]
        return coef

    def _past_linear(self, mm: IntervalMoments, wnode: np.ndarray, n: int) -> np.ndarray:
        """Past part int_{n hh}^{a_max} z_p(t_n - eps a) w(a) da (without the profile)."""
        if n >= self.n_int:
            return np.zeros(self.grid.n_gauss)
        if self._zp_table is None:
            return self._tails[id(mm)][n] * self._zp0
        W = wnode[n:self.n_int]
        Z = self._zp_table[: self.n_int - n]
        if W.shape[2] == 1:
            return np.einsum("kq,kqg->g", W[..., 0], Z)
        return np.einsum("kqg,kqg->g", W, Z)

    def _past_quadratic(self, mm: IntervalMoments, wnode: np.ndarray, n: int, zn: np.ndarray) -> np.ndarray:
        """int_{n hh}^{a_max} (z_n - z_p(t_n - eps a))^2 w(a) da."""
        if n >= self.n_int:
            return np.zeros(self.grid.n_gauss)
        if self._zp_table is None:
            return self._tails[id(mm)][n] * (zn - self._zp0) ** 2
        W = wnode[n:self.n_int]
        D = (zn[None, None, :] - self._zp_table[: self.n_int - n]) ** 2
        if W.shape[2] == 1:
            return np.einsum("kq,kqg->g", W[..., 0], D)
        return np.einsum("kqg,kqg->g", W, D)

    def _linear_functional(self, mm, wnode, n: int, states: np.ndarray | None) -> np.ndarray:
        out = self._past_linear(mm, wnode, n)
        if n > 0:
            coef = self._forward_coef(mm, n)
            out = out + self._apply(coef, states[: coef.shape[0]])
        return self.profile * out

    def known_source(self) -> tuple:
        """Split of the source for the level n+1 about to be computed.

        Returns ``(weight, g_known)``: g_{n+1} = weight * z_{n+1} + g_known at Gauss points.
        """
        n = self.count  # index of the level being computed
        if n == 0:
            return np.zeros(self.grid.n_gauss), self.profile * self._past_linear(self.rho_m, self._w_rho, 0)
        coef = self._forward_coef(self.rho_m, n)
        states = self.recent(coef.shape[0] - 1)
        known = self._apply(coef[1:], states) + self._past_linear(self.rho_m, self._w_rho, n)
        return self.profile * coef[0], self.profile * known

    def source(self) -> np.ndarray:
        """g_n = int_0^a_max z(t_n - eps a) rho da at Gauss points, for the newest level."""
        n = self.n
        if n < 0:
            return self.profile * self._past_linear(self.rho_m, self._w_rho, 0)
        K = min(n, self.n_int)
        return self._linear_functional(self.rho_m, self._w_rho, n, self.recent(K + 1) if n else None)

    def _theta(self, n: int, before_first: bool = False) -> float:
        if before_first or n <= 0:
            vals = self.profile * self._past_linear(self.phi_m, self._w_phi, 0)
        else:
            K = min(n, self.n_int)
            vals = self._linear_functional(self.phi_m, self._w_phi, n, self.recent(K + 1))
        return self.grid.integrate(vals)

    def theta(self) -> float:
        return self._theta(self.n)

    def _quadratic(self, mm: IntervalMoments, wnode) -> np.ndarray:
        n = self.n
        if n < 0:
            raise HistoryCoverageError("no state stored yet")
        K = min(n, self.n_int)
        Z = self.recent(K + 1)
        zn = Z[0]
        out = self._past_quadratic(mm, wnode, n, zn)
        if K:
            out = out + kernels.history_quadratic(mm.m0, mm.m1, mm.m2, np.ascontiguousarray(Z), K)
        return self.profile * out

    def delay_energy(self) -> float:
        return self.grid.integrate(self._quadratic(self.rho_m, self._w_rho)) / (2.0 * self.eps)

    def dissipation(self) -> float:
        # the boundary term rho(a_max) of the truncation is below tail_tol and dropped
        return self.grid.integrate(self._quadratic(self.drho_m, self._w_drho)) / (2.0 * self.eps**2)

    def mu1_inner(self, z: FieldState | None = None) -> float:
        vals = self.recent(1)[0] if z is None else z.gauss(0).ravel()
        return self.grid.integrate(vals * self.mu1_quad)


def init_history(past: PastData, eps: float, dt: float, a_max: float | None = None, *,
                 grid: Grid, kernel: KernelSpec, **kw) -> History:
    """History with retention ceil(eps a_max / dt) + 2 slots and no forward levels yet."""
    if a_max is not None and abs(a_max - kernel.a_max) > 1e-12 * kernel.a_max:
        raise ConfigurationError(f"a_max {a_max} differs from the kernel's {kernel.a_max}; rebuild the kernel")
    return History(grid, kernel, past, eps, dt, **kw)


def delayed_source(h: History, k: KernelSpec | None = None, t: float | None = None,
                   eps: float | None = None) -> np.ndarray:
    _check_args(h, k, t, eps)
    return h.source()


def delay_operator(h: History, k: KernelSpec | None = None, z_now: FieldState | None = None,
                   t: float | None = None, eps: float | None = None) -> np.ndarray:
    """L_eps[z](t_n) = (mu z_n - g_n) / eps at Gauss points."""
    _check_args(h, k, t, eps)
    zn = h.recent(1)[0] if z_now is None else z_now.gauss(0).ravel()
    return (h.mu_quad * zn - h.source()) / h.eps


def theta_invariant(h: History, k: KernelSpec | None = None, eps: float | None = None,
                    t: float | None = None) -> float:
    _check_args(h, k, t, eps)
    return h.theta()


def delay_energy(h: History, k: KernelSpec | None = None, eps: float | None = None,
                 t: float | None = None) -> float:
    _check_args(h, k, t, eps)
    return h.delay_energy()


def dissipation_rate(h: History, k: KernelSpec | None = None, eps: float | None = None,
                     t: float | None = None) -> float:
    _check_args(h, k, t, eps)
    return h.dissipation()


def _check_args(h: History, k, t, eps) -> None:
    if k is not None and k is not h.kernel and k.a_max != h.kernel.a_max:
        raise ConfigurationError("kernel differs from the one the history was built with")
    if eps is not None and abs(eps - h.eps) > 1e-15 * max(1.0, h.eps):
        raise ConfigurationError(f"eps {eps} differs from history eps {h.eps}")
    if t is not None and h.count and abs(t - h.t) > 1e-9 * max(1.0, h.dt):
        raise HistoryCoverageError(f"history is at t = {h.t}, not {t}")
