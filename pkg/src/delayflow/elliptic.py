"""Complete elliptic integral K, Jacobi sn, and the half-period map of the shooting problem.

The shooting solution of w'' = F'(w), w(0) = a, w'(0) = 0 with 0 < a < 1 is
``a * sn(chi_a * s + K(k_a), k_a)`` with ``k_a = a / sqrt(2 - a^2)`` and
``chi_a = sqrt(2 (2 - a^2))``. It is anti-periodic with anti-period
``2 K(k_a) / chi_a``, which we call the half period.
"""
from __future__ import annotations

import math
import warnings

import numpy as np

A_MIN = 1e-12
A_MAX = 1.0 - 1e-12
PRECISION_WARN_HALF_PERIOD = 10.0   # beyond this 1 - a < 3e-6 and the round trip loses 1e-10


class EllipticDomainError(ValueError):
    pass


class PrecisionWarning(UserWarning):
    pass


def _check_modulus(k: float) -> float:
    k = float(k)
    if not (0.0 <= k < 1.0):
        raise EllipticDomainError(f"modulus must satisfy 0 <= k < 1 (K diverges as k -> 1), got {k}")
    return k


def agm(a: float, b: float) -> float:
    """Arithmetic-geometric mean, iterated until the two means agree to rounding."""
    for _ in range(64):
        if abs(a - b) <= 4.0 * np.finfo(float).eps * a:
            break
        a, b = 0.5 * (a + b), math.sqrt(a * b)
    return 0.5 * (a + b)


def agm_K(k: float) -> float:
    """Complete elliptic integral of the first kind, K(k) = pi / (2 AGM(1, sqrt(1 - k^2)))."""
    k = _check_modulus(k)
    return math.pi / (2.0 * agm(1.0, math.sqrt((1.0 - k) * (1.0 + k))))


def _landen_chain(k: float):
    """Descending Landen moduli k_1, k_2, ... until the modulus drops below 1e-15."""
    chain = []
    while k > 1e-15:
        kp = math.sqrt((1.0 - k) * (1.0 + k))
        k = (1.0 - kp) / (1.0 + kp)
        chain.append(k)
        if len(chain) > 40:
            break
    return chain


def jacobi_sn(u, k: float):
    """Jacobi sine amplitude sn(u, k) by descending Landen transformation.

    Odd in ``u`` by construction; accepts scalars or arrays.
    """
    k = _check_modulus(k)
    u = np.asarray(u, dtype=float)
    sign = np.sign(u)
    v = np.abs(u)
    chain = _landen_chain(k)
    for kn in chain:
        v = v / (1.0 + kn)
    sn = np.sin(v)
    for kn in reversed(chain):
        sn = (1.0 + kn) * sn / (1.0 + kn * sn * sn)
    out = sign * sn
    return float(out) if out.ndim == 0 else out


def modulus_for_amplitude(a: float) -> float:
    return a / math.sqrt(2.0 - a * a)


def frequency_for_amplitude(a: float) -> float:
    return math.sqrt(2.0 * (2.0 - a * a))


def half_period(a: float) -> float:
    """Anti-period of the shooting solution started at amplitude a in (0, 1)."""
    a = float(a)
    if not (0.0 < a < 1.0):
        raise EllipticDomainError(f"amplitude must lie in (0, 1), got {a}")
    a = min(a, A_MAX)
    return 2.0 * agm_K(modulus_for_amplitude(a)) / frequency_for_amplitude(a)


def invert_half_period(target: float, tol: float = 1e-12) -> float:
    """The unique amplitude a in (0, 1) with half_period(a) == target.

    The map is strictly increasing from pi/2 (a -> 0) to infinity (a -> 1),
    so plain bisection on [1e-12, 1 - 1e-12] suffices.
    """
    target = float(target)
    if not target > math.pi / 2:
        raise EllipticDomainError(
            f"target {target!r} is below infimum of half-period range (pi/2); no nonconstant solution")
    lo, hi = A_MIN, A_MAX
    if half_period(hi) < target:
        raise EllipticDomainError(f"target {target} exceeds the half period reachable at a = 1 - 1e-12")
    if target > PRECISION_WARN_HALF_PERIOD:
        warnings.warn(f"half period {target:.3g} > {PRECISION_WARN_HALF_PERIOD}: amplitude within "
                      "rounding of 1, expect loss of precision", PrecisionWarning, stacklevel=2)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = half_period(mid)
        if abs(val - target) < tol:
            return mid
        if val < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 2.0 * np.finfo(float).eps:
            break
    return 0.5 * (lo + hi)


def shooting_profile(a: float, s, sign: int = 1):
    """w_a(s) = a sn(chi_a s + K(k_a), k_a), optionally negated."""
    k = modulus_for_amplitude(a)
    return sign * a * jacobi_sn(frequency_for_amplitude(a) * np.asarray(s, dtype=float) + agm_K(k), k)
