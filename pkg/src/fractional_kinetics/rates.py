"""Jump-approximation identities for stable generators, as executable checks.

For a density p on (0, inf) that equals ``y**(-1-alpha)`` exactly above a
threshold B, the scaled integral ``h**(-alpha) * int f(h y) p(y) dy``

* equals ``int f(y) y**(-1-alpha) dy`` exactly whenever f is supported on
  [B*h, inf), and
* differs from it by at most ``C_B * L * h**(1-alpha)`` for continuous f
  with f(0) = 0 and |f(y)| <= L*y near 0, where
  ``C_B = B**(1-alpha)/(1-alpha) + int_0^B y p(y) dy``.

``rate_bound_check`` runs the bound over an h-sweep and also fits the
empirical decay slope of the gap.

Note the identities never use the total mass of p: the pure-tail case
(nothing below B) is admitted even where it is not normalisable, e.g.
B = 1 with alpha < 1, where the tail mass is 1/alpha.  The completed
construction (uniform part below B) is a probability density and requires
B >= alpha**(-1/alpha).
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import ParameterError, QuadratureError

__all__ = [
    "RateCase",
    "RateTestFunction",
    "RateReport",
    "lhs_scaled_integral",
    "rhs_stable_integral",
    "rate_bound_check",
]

_QUAD_OPTS = dict(epsabs=1e-12, epsrel=1e-10, limit=500)


@dataclass
class RateCase:
    """A tail density p and its threshold B.

    ``sub_b`` selects what p does below B: "none" (identically zero; the
    case used by the quantitative acceptance check) or "uniform" (the flat
    completion that makes p a probability density).
    """

    alpha: float
    B: float = 1.0
    sub_b: str = "none"

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ParameterError("alpha must lie in (0,1)")
        if self.B <= 0.0:
            raise ParameterError("threshold B must be positive")
        if self.sub_b not in ("none", "uniform"):
            raise ParameterError("sub_b must be 'none' or 'uniform'")
        self.tail_mass = self.B ** (-self.alpha) / self.alpha
        if self.sub_b == "uniform":
            level = (1.0 - self.tail_mass) / self.B
            if level < 0.0:
                raise ParameterError(
                    f"no uniform completion exists: tail mass {self.tail_mass:.6g} "
                    f"exceeds 1 (need B >= alpha**(-1/alpha) = "
                    f"{self.alpha ** (-1.0 / self.alpha):.6g})"
                )
            if level > 1.0:
                raise ParameterError(
                    f"uniform completion level {level:.6g} exceeds the density cap 1"
                )
            self.sub_level = level
        else:
            self.sub_level = 0.0

    def density(self, y):
        y = np.asarray(y, dtype=float)
        out = np.where(y >= self.B, np.where(y > 0, y, 1.0) ** (-1.0 - self.alpha), 0.0)
        if self.sub_level > 0.0:
            out = out + np.where((y >= 0) & (y < self.B), self.sub_level, 0.0)
        return out

    def total_mass(self) -> float:
        return self.tail_mass + self.sub_level * self.B

    def is_probability(self, tol: float = 1e-10) -> bool:
        return abs(self.total_mass() - 1.0) <= tol

    def sub_b_first_moment(self) -> float:
        # int_0^B y p(y) dy, needed by the constant C_B
        return self.sub_level * self.B**2 / 2.0

    def rate_constant(self) -> float:
        """C_B = B**(1-alpha)/(1-alpha) + int_0^B y p(y) dy."""
        return self.B ** (1.0 - self.alpha) / (1.0 - self.alpha) + self.sub_b_first_moment()


@dataclass
class RateTestFunction:
    """Test function with the metadata the bound needs."""

    fn: Callable
    lipschitz_at_zero: float
    support: Optional[tuple] = None
    label: str = ""


@dataclass
class RateReport:
    """One row per h in the sweep plus the fitted decay slope."""

    h_values: np.ndarray
    lhs: np.ndarray
    rhs: float
    abs_err: np.ndarray
    bound: np.ndarray
    passed: np.ndarray
    slope: float
    constant: float

    def all_passed(self) -> bool:
        return bool(np.all(self.passed))


def _quad(fn, lo, hi, points=None):
    if points:
        pts = sorted(p for p in points if lo < p < hi)
    else:
        pts = None
    val, err = integrate.quad(fn, lo, hi, points=pts if np.isfinite(hi) else None,
                              **_QUAD_OPTS)
    if not np.isfinite(val) or err > 1e-6 * (1.0 + abs(val)):
        raise QuadratureError(f"quadrature failed on [{lo}, {hi}]: value {val}, err {err}")
    return val


def lhs_scaled_integral(case: RateCase, f, h: float, support=None) -> float:
    """h**(-alpha) * int_0^inf f(h*y) p(y) dy.

    The quadrature splits at y = B and at the support edges of f (mapped
    by 1/h) so discontinuous test functions integrate exactly.
    """
    if h <= 0:
        raise ParameterError("h must be positive")
    pts = [case.B]
    if support is not None:
        pts += [support[0] / h, support[1] / h]
    lo_edge = 0.0 if case.sub_level > 0 else case.B
    hi_edge = np.inf
    if support is not None:
        lo_edge = max(lo_edge, support[0] / h)
        hi_edge = min(hi_edge, support[1] / h)
    if hi_edge <= lo_edge:
        return 0.0

    def integrand(y):
        return float(f(h * y)) * float(case.density(y))

    total = 0.0
    if np.isfinite(hi_edge):
        total = _quad(integrand, lo_edge, hi_edge, points=pts)
    else:
        mid = max(lo_edge * 2, case.B * 4, 16.0 / h)
        total = _quad(integrand, lo_edge, mid, points=pts) + _quad(integrand, mid, np.inf)
    return h ** (-case.alpha) * total


def rhs_stable_integral(f, alpha: float, support=None,
                        lipschitz_at_zero: Optional[float] = None) -> float:
    """int_0^inf f(y) y**(-1-alpha) dy with analytic handling of y -> 0.

    Near zero the integrand is bounded by L * y**(-alpha) (integrable);
    the quadrature uses a split there and verifies convergence.  For f not
    integrable against the kernel a quadrature error is raised.
    """
    if not (0.0 < alpha < 1.0):
        raise ParameterError("alpha must lie in (0,1)")
    lo, hi = (support if support is not None else (0.0, np.inf))

    def integrand(y):
        return float(f(y)) * y ** (-1.0 - alpha)

    total = 0.0
    if lo < 1e-12:
        # the Lipschitz bound makes [0, eps] negligible at the tolerance
        eps = 1e-10
        if lipschitz_at_zero is not None:
            head = lipschitz_at_zero * eps ** (1.0 - alpha) / (1.0 - alpha)
            if head > 1e-9:
                eps = (1e-10 * (1.0 - alpha) / max(lipschitz_at_zero, 1e-300)) ** (
                    1.0 / (1.0 - alpha)
                )
        total += _quad(integrand, eps, 1.0 if hi > 1.0 else hi)
        lo = 1.0 if hi > 1.0 else hi
    if hi > lo:
        if np.isfinite(hi):
            total += _quad(integrand, lo, hi)
        else:
            total += _quad(integrand, lo, np.inf)
    if not np.isfinite(total):
        raise QuadratureError("integral against the stable kernel diverged")
    return total


def rate_bound_check(case: RateCase, f: RateTestFunction, h_sweep) -> RateReport:
    """Check |lhs - rhs| <= C_B * L * h**(1-alpha) over the sweep.

    Also fits the slope of log|lhs-rhs| against log h; the theoretical
    decay exponent is at least 1-alpha.
    """
    h_values = np.asarray(sorted(h_sweep, reverse=True), dtype=float)
    rhs = rhs_stable_integral(f.fn, case.alpha, support=f.support,
                              lipschitz_at_zero=f.lipschitz_at_zero)
    C = case.rate_constant()
    lhs = np.array([
        lhs_scaled_integral(case, f.fn, h, support=f.support) for h in h_values
    ])
    err = np.abs(lhs - rhs)
    bound = C * f.lipschitz_at_zero * h_values ** (1.0 - case.alpha)
    passed = err <= bound
    mask = err > 1e-14
    if mask.sum() >= 2:
        slope = float(np.polyfit(np.log(h_values[mask]), np.log(err[mask]), 1)[0])
    else:
        slope = np.inf
    return RateReport(
        h_values=h_values, lhs=lhs, rhs=float(rhs), abs_err=err,
        bound=bound, passed=passed, slope=slope, constant=float(C),
    )
