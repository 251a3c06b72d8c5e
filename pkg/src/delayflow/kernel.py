"""Memory kernels rho(s, a), their admissibility checks and derived moments.

Three families are supported:

* exponential ``rho = b(s) exp(-a)``
* power law ``rho = K b(s) (1 + a)^(-m)``
* tabulated values on an (s, a) grid, bilinear in between

The first two are separable, ``rho = b(s) r(a)``; the delay module exploits that.
Every kernel is truncated at an age ``a_max`` beyond which it is treated as zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, optimize, special

from .spatial import ConfigurationError, Grid, make_grid

TAIL_TOL = 1e-10
QUAD_TOL = 1e-10
MONOTONE_SLACK = 1e-12
PANEL_NODES = 8


class HypothesisViolation(ConfigurationError):
    pass


class QuadratureError(RuntimeError):
    pass


class PastDataError(ConfigurationError):
    pass


def _profile(b, L: float) -> Callable:
    if callable(b):
        return lambda s: np.broadcast_to(np.asarray(b(np.asarray(s, dtype=float)), dtype=float),
                                         np.shape(s)).astype(float)
    c = float(b)
    return lambda s: np.full(np.shape(s), c)


def _check_profile(b: Callable, L: float, n: int = 2001) -> np.ndarray:
    s = np.linspace(0.0, L, n)
    v = b(s)
    if not np.all(np.isfinite(v)):
        raise ConfigurationError("kernel profile b(s) is not finite on [0, L]")
    if v.min() <= 0.0:
        raise ConfigurationError(f"kernel profile b(s) must be > 0 on [0, L]; min sampled value {v.min():.3e}")
    h = s[1] - s[0]
    d2 = np.diff(v, 2) / h**2
    if not np.all(np.isfinite(d2)):
        raise ConfigurationError("kernel profile b(s) needs two bounded derivatives")
    return v


def age_panels(a_max: float, n: int = PANEL_NODES):
    """Composite Gauss-Legendre nodes and weights on [0, a_max].

    Breakpoints are geometric from 2^-12 (refined towards a = 0) merged with
    unit-spaced ones below 64, so both the kernel peak and long tails are resolved.
    """
    geo = 2.0 ** np.arange(-12, int(math.ceil(math.log2(max(a_max, 1.0)))) + 1)
    lin = np.arange(1.0, min(a_max, 64.0), 1.0)
    br = np.unique(np.concatenate([[0.0], geo[geo < a_max], lin, [a_max]]))
    x, w = np.polynomial.legendre.leggauss(n)
    lo, hi = br[:-1, None], br[1:, None]
    nodes = (0.5 * (hi - lo) * (x + 1.0) + lo).ravel()
    weights = (0.5 * (hi - lo) * w).ravel()
    return nodes, weights


@dataclass(frozen=True, eq=False)
class KernelSpec:
    family: str
    params: dict
    L: float
    a_max: float
    profile: Callable | None = field(repr=False)     # b(s); None for tabulated kernels
    age: Callable | None = field(repr=False)         # r(a)
    age_deriv: Callable | None = field(repr=False)   # r'(a)
    age_tail: Callable | None = field(repr=False)    # int_tau^a_max r(a) da
    table: tuple | None = field(default=None, repr=False)
    tail_tol: float = TAIL_TOL
    quad_tol: float = QUAD_TOL

    @property
    def separable(self) -> bool:
        return self.table is None

    def rho(self, s, a):
        s, a = np.asarray(s, dtype=float), np.asarray(a, dtype=float)
        inside = (a >= 0.0) & (a <= self.a_max)
        if self.separable:
            return np.where(inside, self.profile(s) * self.age(a), 0.0)
        return np.where(inside, _bilinear(self.table, "rho", s, a), 0.0)

    def drho(self, s, a):
        s, a = np.asarray(s, dtype=float), np.asarray(a, dtype=float)
        inside = (a >= 0.0) & (a <= self.a_max)
        if self.separable:
            return np.where(inside, self.profile(s) * self.age_deriv(a), 0.0)
        return np.where(inside, _bilinear(self.table, "drho", s, a), 0.0)

    def tail(self, s, tau):
        """Truncated tail phi_T(s, tau) = int_tau^a_max rho(s, a) da."""
        s, tau = np.asarray(s, dtype=float), np.asarray(tau, dtype=float)
        tau = np.clip(tau, 0.0, self.a_max)
        if self.separable:
            return self.profile(s) * self.age_tail(tau)
        return _bilinear(self.table, "tail", s, tau)

    def to_dict(self) -> dict:
        return {"family": self.family, "a_max": self.a_max, **{k: v for k, v in self.params.items()
                                                              if isinstance(v, (int, float, str))}}


def _exp_a_max(b_l2: float, tol: float) -> float:
    # tail of int a^{3/2} ||rho(., a)||_2 da is ||b||_2 Gamma(5/2, A)
    g = lambda A: b_l2 * special.gammaincc(2.5, A) * special.gamma(2.5) - tol
    return float(optimize.brentq(g, 1.0, 200.0, xtol=1e-8))


def _power_a_max(K: float, m: float, b_l2: float, tol: float) -> float:
    # int_A^inf a^{3/2} (1+a)^{-m} da <= (1+A)^{5/2-m} / (m - 5/2)
    return float((tol * (m - 2.5) / (K * b_l2)) ** (1.0 / (2.5 - m)) - 1.0)


def make_exponential_kernel(b=1.0, L: float = 1.0, a_max: float | None = None,
                            tail_tol: float = TAIL_TOL, quad_tol: float = QUAD_TOL) -> KernelSpec:
    """rho(s, a) = b(s) exp(-a); mu = mu1 = b and phi = b exp(-tau) in closed form."""
    prof = _profile(b, L)
    v = _check_profile(prof, L)
    b_l2 = math.sqrt(np.trapezoid(v * v, dx=L / (v.size - 1)))
    if a_max is None:
        a_max = _exp_a_max(b_l2, tail_tol)
    A = float(a_max)
    if not A > 0:
        raise ConfigurationError(f"kernel.a_max must be > 0, got {a_max}")
    eA = math.exp(-A)
    return KernelSpec(
        family="exponential", params={"b": b}, L=float(L), a_max=A, profile=prof,
        age=lambda a: np.exp(-a), age_deriv=lambda a: -np.exp(-a),
        age_tail=lambda t: np.exp(-t) - eA, tail_tol=tail_tol, quad_tol=quad_tol)


def make_power_kernel(K: float = 1.0, m: float = 3.0, c: float = 1.0, b=1.0, L: float = 1.0,
                      a_max: float | None = None, tail_tol: float = TAIL_TOL,
                      quad_tol: float = QUAD_TOL) -> KernelSpec:
    """rho(s, a) = K b(s) (1 + a)^(-m) with m > 5/2.

    ``c`` is the constant of the sufficient coercivity bound
    ``-d_a rho >= c (1 + a)^(-4)``; whether it holds is recorded by
    :func:`check_hypotheses`, not enforced here.
    """
    K, m, c = float(K), float(m), float(c)
    if not m > 2.5:
        raise HypothesisViolation(
            f"power kernel exponent m={m} violates a^{{3/2}} moment condition (needs m > 5/2)")
    if not K > 0:
        raise ConfigurationError(f"power kernel K must be > 0, got {K}")
    if not c > 0:
        raise ConfigurationError(f"power kernel tail coefficient c must be > 0, got {c}")
    prof = _profile(b, L)
    v = _check_profile(prof, L)
    b_l2 = math.sqrt(np.trapezoid(v * v, dx=L / (v.size - 1)))
    if a_max is None:
        a_max = _power_a_max(K, m, b_l2, tail_tol)
    A = float(a_max)
    if not A > 0:
        raise ConfigurationError(f"kernel.a_max must be > 0, got {a_max}")
    cA = (1.0 + A) ** (1.0 - m)
    return KernelSpec(
        family="power", params={"K": K, "m": m, "c": c, "b": b}, L=float(L), a_max=A, profile=prof,
        age=lambda a: K * (1.0 + a) ** (-m), age_deriv=lambda a: -K * m * (1.0 + a) ** (-m - 1.0),
        age_tail=lambda t: K * ((1.0 + t) ** (1.0 - m) - cA) / (m - 1.0),
        tail_tol=tail_tol, quad_tol=quad_tol)


def _pl_tail(a_grid: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Cumulative tails int_{a_j}^{a_end} of a piecewise-linear function, per row."""
    seg = 0.5 * (vals[..., 1:] + vals[..., :-1]) * np.diff(a_grid)
    tail = np.zeros_like(vals)
    tail[..., :-1] = np.cumsum(seg[..., ::-1], axis=-1)[..., ::-1]
    return tail


def make_tabulated_kernel(s_grid, a_grid, values, L: float | None = None,
                          tail_tol: float = TAIL_TOL, quad_tol: float = QUAD_TOL) -> KernelSpec:
    """Kernel from samples ``values[i, j] = rho(s_i, a_j)``, bilinear in between.

    The age derivative uses centred differences on the age grid (one-sided at the
    ends). The kernel vanishes beyond the last age node, which serves as a_max.
    Admissibility is not enforced here; see :func:`check_hypotheses`.
    """
    s_grid = np.asarray(s_grid, dtype=float)
    a_grid = np.asarray(a_grid, dtype=float)
    vals = np.asarray(values, dtype=float)
    if vals.shape != (s_grid.size, a_grid.size):
        raise ConfigurationError(f"tabulated kernel values must have shape {(s_grid.size, a_grid.size)}, "
                                 f"got {vals.shape}")
    if s_grid.size < 2 or a_grid.size < 3 or np.any(np.diff(s_grid) <= 0) or np.any(np.diff(a_grid) <= 0):
        raise ConfigurationError("tabulated kernel grids must be strictly increasing (>= 2 s, >= 3 a nodes)")
    if a_grid[0] != 0.0:
        raise ConfigurationError("tabulated kernel age grid must start at a = 0")
    if not np.all(np.isfinite(vals)):
        raise ConfigurationError("tabulated kernel values must be finite")
    drho = np.gradient(vals, a_grid, axis=1, edge_order=1)
    table = (s_grid, a_grid, {"rho": vals, "drho": drho, "tail": _pl_tail(a_grid, vals)})
    L = float(s_grid[-1] if L is None else L)
    return KernelSpec(family="tabulated", params={"n_s": int(s_grid.size), "n_a": int(a_grid.size)},
                      L=L, a_max=float(a_grid[-1]), profile=None, age=None, age_deriv=None,
                      age_tail=None, table=table, tail_tol=tail_tol, quad_tol=quad_tol)


def _bilinear(table, key, s, a):
    s_grid, a_grid, data = table
    v = data[key]
    s, a = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(a, dtype=float))
    i = np.clip(np.searchsorted(s_grid, s, side="right") - 1, 0, s_grid.size - 2)
    j = np.clip(np.searchsorted(a_grid, a, side="right") - 1, 0, a_grid.size - 2)
    ts = np.clip((s - s_grid[i]) / (s_grid[i + 1] - s_grid[i]), 0.0, 1.0)
    ta = np.clip((a - a_grid[j]) / (a_grid[j + 1] - a_grid[j]), 0.0, 1.0)
    if key == "tail":
        # exact tail of the piecewise-linear interpolant inside the cell
        def row(ii):
            r0, r1 = data["rho"][ii, j], data["rho"][ii, j + 1]
            da = a_grid[j + 1] - a_grid[j]
            ra = r0 + ta * (r1 - r0)
            return v[ii, j + 1] + 0.5 * (ra + r1) * (1.0 - ta) * da
        return (1.0 - ts) * row(i) + ts * row(i + 1)
    lo = (1.0 - ta) * v[i, j] + ta * v[i, j + 1]
    hi = (1.0 - ta) * v[i + 1, j] + ta * v[i + 1, j + 1]
    return (1.0 - ts) * lo + ts * hi


# --------------------------------------------------------------------------- moments

@dataclass(frozen=True, eq=False)
class KernelMoments:
    mu: Callable
    mu1: Callable
    phi: Callable
    coercivity: float
    fubini_error: float = 0.0


def _coercivity(k: KernelSpec) -> float:
    """int_I int rho^2 / |d_a rho| da ds, with 0/0 read as 0."""
    if k.family == "exponential":
        s = np.linspace(0.0, k.L, 2001)
        return float(np.trapezoid(k.profile(s), s))
    if k.family == "power":
        K, m = k.params["K"], k.params["m"]
        s = np.linspace(0.0, k.L, 2001)
        # int_0^inf K^2 (1+a)^{-2m} / (K m (1+a)^{-m-1}) da = K / (m (m - 2))
        return float(np.trapezoid(k.profile(s), s)) * K / (m * (m - 2.0))
    s_grid, a_grid, data = k.table
    r, d = data["rho"], np.abs(data["drho"])
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(r == 0.0, 0.0, r * r / d)
    if np.any(~np.isfinite(q)):
        return math.inf
    return float(np.trapezoid(np.trapezoid(q, a_grid, axis=1), s_grid))


def moments(k: KernelSpec, check_points: int = 9) -> KernelMoments:
    """mu, mu1 and phi of a kernel, plus the coercivity integral.

    Closed forms are used for the built-in families (over the untruncated age
    range); tabulated kernels are integrated exactly on their table. The identity
    mu1(s) = int phi(s, tau) dtau is verified at a few points with adaptive quadrature.
    """
    if k.family == "exponential":
        b = k.profile
        mu, mu1 = b, b
        phi = lambda s, tau: b(np.asarray(s, float)) * np.exp(-np.asarray(tau, float))
        upper = np.inf
    elif k.family == "power":
        K, m, b = k.params["K"], k.params["m"], k.profile
        mu = lambda s: K * b(s) / (m - 1.0)
        mu1 = lambda s: K * b(s) / ((m - 1.0) * (m - 2.0))
        phi = lambda s, tau: K * b(np.asarray(s, float)) * (1.0 + np.asarray(tau, float)) ** (1.0 - m) / (m - 1.0)
        upper = np.inf
    else:
        s_grid, a_grid, data = k.table
        r = data["rho"]
        da = np.diff(a_grid)
        m0 = np.sum(0.5 * (r[:, 1:] + r[:, :-1]) * da, axis=1)
        # int a rho over a linear segment, exact
        a0, a1 = a_grid[:-1], a_grid[1:]
        m1 = np.sum(da / 6.0 * (r[:, :-1] * (2 * a0 + a1) + r[:, 1:] * (a0 + 2 * a1)), axis=1)
        mu = lambda s: np.interp(s, s_grid, m0)
        mu1 = lambda s: np.interp(s, s_grid, m1)
        phi = k.tail
        upper = k.a_max
    worst = 0.0
    for s in np.linspace(0.0, k.L, check_points):
        if np.isinf(upper):
            val, _ = integrate.quad(lambda t: float(phi(s, t)), 0.0, upper, limit=200, epsabs=1e-13, epsrel=1e-12)
        else:
            # phi is quadratic on each age segment, so per-segment Simpson is exact
            a = k.table[1]
            mid = 0.5 * (a[1:] + a[:-1])
            val = float(np.sum(np.diff(a) / 6.0 * (phi(s, a[:-1]) + 4.0 * phi(s, mid) + phi(s, a[1:]))))
        worst = max(worst, abs(val - float(mu1(s))))
    if worst > k.quad_tol * max(1.0, float(np.max(np.abs(mu1(np.linspace(0, k.L, check_points)))))):
        raise QuadratureError(f"Fubini identity mu1 = int phi dtau not met: residual {worst:.3e} > {k.quad_tol:.1e}")
    return KernelMoments(mu=mu, mu1=mu1, phi=phi, coercivity=_coercivity(k), fubini_error=worst)


def truncated_mu1(k: KernelSpec, s):
    """int_0^a_max a rho(s, a) da (what the time stepper actually sees)."""
    if k.separable:
        nodes, w = age_panels(k.a_max)
        return k.profile(np.asarray(s, float)) * float(np.dot(w, nodes * k.age(nodes)))
    return moments(k).mu1(s)


# --------------------------------------------------------------------------- hypotheses

@dataclass
class HypothesisCheck:
    name: str
    passed: bool
    value: float
    detail: str = ""

    def to_dict(self) -> dict:
        v = self.value
        return {"name": self.name, "passed": bool(self.passed),
                "value": v if math.isfinite(v) else ("inf" if v > 0 else "-inf"), "detail": self.detail}


@dataclass
class HypothesisReport:
    family: str
    checks: list
    sufficient: HypothesisCheck | None = None
    truncation_tail: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> HypothesisCheck:
        for c in self.checks:
            if c.name == name:
                return c
        if self.sufficient is not None and self.sufficient.name == name:
            return self.sufficient
        raise KeyError(name)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"family": self.family, "passed": self.passed,
                "checks": [c.to_dict() for c in self.checks],
                "sufficient_coercivity": None if self.sufficient is None else self.sufficient.to_dict(),
                "truncation_tail": self.truncation_tail}


def _sample_grid(k: KernelSpec, n_s: int = 65):
    s = np.linspace(0.0, k.L, n_s)
    if k.separable:
        a, _ = age_panels(k.a_max)
        a = np.concatenate([[0.0], a, [k.a_max]])
    else:
        a = k.table[1]
    return s, a


def check_hypotheses(k: KernelSpec) -> HypothesisReport:
    """Evaluate the five standing kernel assumptions on sample grids.

    Checks, in order: nonnegativity, monotone age decay, positive lower bound of
    mu, the a^{3/2} and a moment bounds, and the coercivity integral. For power
    kernels the sufficient pointwise bound -d_a rho >= c (1+a)^(-4) is reported
    separately.
    """
    s, a = _sample_grid(k)
    S, A = np.meshgrid(s, a, indexing="ij")
    r = k.rho(S, A)
    d = k.drho(S, A)
    checks = []
    rmin = float(np.min(r))
    checks.append(HypothesisCheck("nonnegativity", rmin >= 0.0 and bool(np.all(np.isfinite(r))), rmin,
                                  "min sampled rho"))
    dmax = float(np.max(d))
    checks.append(HypothesisCheck("monotone_decay", dmax <= MONOTONE_SLACK, dmax, "max sampled d_a rho"))
    mom = None
    try:
        mom = moments(k)
        mu_min = float(np.min(mom.mu(s)))
    except QuadratureError as exc:
        mu_min = float(np.min(k.tail(s, 0.0)))
        checks.append(HypothesisCheck("moments_quadrature", False, math.nan, str(exc)))
    checks.append(HypothesisCheck("mu_min", mu_min > 0.0, mu_min, "min over s of mu(s)"))

    nodes, w = age_panels(k.a_max)
    Sq, Aq = np.meshgrid(s, nodes, indexing="ij")
    rq = k.rho(Sq, Aq)
    l2 = np.sqrt(np.trapezoid(rq * rq, s, axis=0))
    linf = np.max(np.abs(rq), axis=0)
    m32 = float(np.dot(w, nodes**1.5 * l2))
    m1 = float(np.dot(w, nodes * linf))
    if k.family == "exponential":
        bl2 = math.sqrt(float(np.trapezoid(k.profile(s) ** 2, s)))
        tail = bl2 * float(special.gammaincc(2.5, k.a_max) * special.gamma(2.5))
    elif k.family == "power":
        bl2 = math.sqrt(float(np.trapezoid(k.profile(s) ** 2, s)))
        mexp = k.params["m"]
        tail = k.params["K"] * bl2 * (1.0 + k.a_max) ** (2.5 - mexp) / (mexp - 2.5)
    else:
        tail = 0.0
    finite = math.isfinite(m32) and math.isfinite(m1)
    checks.append(HypothesisCheck("moment", finite, m32,
                                  f"int a^(3/2)||rho||_2 da (truncated); int a||rho||_inf da = {m1:.6g}"))
    coer = mom.coercivity if mom is not None else _coercivity(k)
    checks.append(HypothesisCheck("coercivity", math.isfinite(coer), coer, "int int rho^2/|d_a rho|"))

    sufficient = None
    if k.family == "power":
        c = k.params["c"]
        margin = -d - c * (1.0 + A) ** -4.0
        worst = float(np.min(margin))
        sufficient = HypothesisCheck("coercivity_sufficient", worst >= -MONOTONE_SLACK, worst,
                                     "min of -d_a rho - c (1+a)^-4 over samples")
    return HypothesisReport(family=k.family, checks=checks, sufficient=sufficient, truncation_tail=tail)


# --------------------------------------------------------------------------- kappa

def kappa_eps(k: KernelSpec, past, eps: float, grid: Grid | None = None) -> float:
    """kappa_eps = int int z_p(s, -eps tau) phi(s, tau) ds dtau.

    ``past`` is called as ``past(s, t)`` with an array of s and a scalar t <= 0.
    The age integral uses the truncated tail on [0, a_max]; eps = 0 gives (z_p(0), mu1).
    """
    eps = float(eps)
    if eps < 0:
        raise ConfigurationError(f"eps must be >= 0, got {eps}")
    grid = grid or make_grid(k.L, 200)
    s = grid.gauss_points
    w = grid.gauss_weights

    def zp(t):
        v = np.broadcast_to(np.asarray(past(s, t), dtype=float), s.shape)
        if not np.all(np.isfinite(v)):
            raise PastDataError(f"past data undefined at t = {t:.6g}")
        return v

    nodes, aw = age_panels(k.a_max)
    if eps == 0.0:
        mu1 = np.asarray(truncated_mu1(k, s), dtype=float)
        return float(np.dot(w, zp(0.0) * mu1))
    total = 0.0
    for tau, wt in zip(nodes, aw):
        total += wt * np.dot(w, zp(-eps * tau) * k.tail(s, tau))
    return float(total)
