"""Problem data: coefficients, measures, and test functionals.

A model is a one-dimensional interacting diffusion family

    (L f)(x) = 0.5 * G(x) * f''(x) + b_mu(x) * f'(x),
    b_mu(x)  = b0(x) + integral k(x, y) mu(dy),

together with a waiting-time intensity ``a(x)`` and a base tail order
``alpha``.  The effective tail order attached to a probability measure mu
is ``alpha * (a, mu)``, which the model invariants keep inside (0, 1).

Measures come in two interchangeable representations: atoms of weight 1/N
(``EmpiricalMeasure``) and a cell-averaged density on a uniform grid
(``GridDensity``, midpoint quadrature).
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ParameterError

__all__ = [
    "ModelSpec",
    "EmpiricalMeasure",
    "GridDensity",
    "TestFunctional",
    "total_intensity",
    "mean_field_drift",
    "order_of",
    "make_coefficient",
    "make_kernel",
]


# ---------------------------------------------------------------------------
# measures
# ---------------------------------------------------------------------------

class EmpiricalMeasure:
    """N equally weighted atoms; pairing (f, mu) = mean of f over atoms."""

    def __init__(self, positions):
        pos = np.atleast_1d(np.asarray(positions, dtype=float))
        if pos.ndim != 1 or pos.size < 1:
            raise ParameterError("need at least one particle position")
        self.positions = pos

    @property
    def n(self) -> int:
        return self.positions.size

    def pair(self, f) -> float:
        return float(np.mean(f(self.positions)))

    def mean(self) -> float:
        return float(np.mean(self.positions))

    def to_grid(self, x_lo: float, x_hi: float, cells: int) -> "GridDensity":
        """Histogram onto a uniform grid; mass is preserved exactly.

        Every atom must lie inside [x_lo, x_hi]; out-of-domain atoms are an
        error rather than silently clipped.
        """
        pos = self.positions
        if pos.min() < x_lo or pos.max() > x_hi:
            raise ParameterError("positions fall outside the target grid domain")
        dx = (x_hi - x_lo) / cells
        idx = np.minimum(((pos - x_lo) / dx).astype(int), cells - 1)
        counts = np.bincount(idx, minlength=cells).astype(float)
        values = counts / (self.n * dx)
        return GridDensity(x_lo, x_hi, values)

    def __repr__(self):
        return f"EmpiricalMeasure(n={self.n})"


class GridDensity:
    """Nonnegative cell-averaged density on a uniform grid, total mass 1."""

    MASS_TOL = 1e-12

    def __init__(self, x_lo: float, x_hi: float, values, check: bool = True):
        self.x_lo = float(x_lo)
        self.x_hi = float(x_hi)
        self.values = np.asarray(values, dtype=float)
        if self.x_hi <= self.x_lo:
            raise ParameterError("x_hi must exceed x_lo")
        if self.values.ndim != 1 or self.values.size < 1:
            raise ParameterError("values must be a nonempty 1-d array")
        if check:
            if np.any(self.values < 0):
                raise ParameterError("density values must be nonnegative")
            if abs(self.mass() - 1.0) > self.MASS_TOL:
                raise ParameterError(
                    f"density mass {self.mass():.15f} differs from 1 beyond {self.MASS_TOL}"
                )

    @classmethod
    def from_function(cls, fn, x_lo, x_hi, cells, normalize=True):
        dx = (x_hi - x_lo) / cells
        centers = x_lo + dx * (np.arange(cells) + 0.5)
        vals = np.clip(np.asarray(fn(centers), dtype=float), 0.0, None)
        if normalize:
            vals = vals / (vals.sum() * dx)
        return cls(x_lo, x_hi, vals)

    @property
    def cells(self) -> int:
        return self.values.size

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.cells

    @property
    def centers(self) -> np.ndarray:
        return self.x_lo + self.dx * (np.arange(self.cells) + 0.5)

    def mass(self) -> float:
        return float(self.values.sum() * self.dx)

    def pair(self, f) -> float:
        """Midpoint-rule pairing (f, mu); second order in dx for smooth f."""
        return float(np.sum(f(self.centers) * self.values) * self.dx)

    def mean(self) -> float:
        return self.pair(lambda x: x)

    def quantile_positions(self, n: int) -> np.ndarray:
        """Deterministic positions at the (i+1/2)/n quantiles of the density."""
        cdf = np.concatenate([[0.0], np.cumsum(self.values) * self.dx])
        cdf = cdf / cdf[-1]
        edges = np.linspace(self.x_lo, self.x_hi, self.cells + 1)
        q = (np.arange(n) + 0.5) / n
        return np.interp(q, cdf, edges)

    def sample(self, n: int, rng) -> np.ndarray:
        """Random inverse-CDF sample of n positions."""
        cdf = np.concatenate([[0.0], np.cumsum(self.values) * self.dx])
        cdf = cdf / cdf[-1]
        edges = np.linspace(self.x_lo, self.x_hi, self.cells + 1)
        gen = rng if isinstance(rng, np.random.Generator) else rng.generator
        return np.interp(gen.random(n), cdf, edges)

    def __repr__(self):
        return f"GridDensity([{self.x_lo}, {self.x_hi}], cells={self.cells})"


# ---------------------------------------------------------------------------
# coefficient families (config-constructible, no expression parsing)
# ---------------------------------------------------------------------------

def make_coefficient(family: str, **params):
    """Build a scalar coefficient function by family name.

    Families: "constant" (value), "affine" (intercept, slope),
    "linear-drift" (rate; gives -rate*x), "sine" (base, amplitude, frequency),
    "cosine-bump" (base, amplitude, frequency), "zero".
    Returns (callable, metadata) where metadata carries exact bounds on the
    model domain when available.
    """
    if family == "constant":
        c = float(params["value"])
        return (lambda x, c=c: np.full_like(np.asarray(x, dtype=float), c)), {"min": c, "max": c}
    if family == "zero":
        return (lambda x: np.zeros_like(np.asarray(x, dtype=float))), {"min": 0.0, "max": 0.0}
    if family == "affine":
        c0, c1 = float(params["intercept"]), float(params["slope"])
        return (lambda x, c0=c0, c1=c1: c0 + c1 * np.asarray(x, dtype=float)), {
            "affine": (c0, c1)
        }
    if family == "linear-drift":
        rate = float(params["rate"])
        return (lambda x, r=rate: -r * np.asarray(x, dtype=float)), {"rate": rate}
    if family == "sine":
        c0, c1 = float(params["base"]), float(params["amplitude"])
        w = float(params.get("frequency", 1.0))
        return (
            lambda x, c0=c0, c1=c1, w=w: c0 + c1 * np.sin(w * np.asarray(x, dtype=float))
        ), {"min": c0 - abs(c1), "max": c0 + abs(c1)}
    if family == "cosine-bump":
        c0, c1 = float(params["base"]), float(params["amplitude"])
        w = float(params.get("frequency", 1.0))
        return (
            lambda x, c0=c0, c1=c1, w=w: c0 + c1 * np.cos(w * np.asarray(x, dtype=float))
        ), {"min": c0 - abs(c1), "max": c0 + abs(c1)}
    raise ParameterError(f"unknown coefficient family {family!r}")


def make_kernel(family: str, **params):
    """Build a pairwise interaction kernel k(x, y) by family name.

    Families: "zero", "attract-mean" (strength; k = strength*(y-x)),
    "gaussian-kernel" (strength, width).  All kernels broadcast over numpy
    arrays in both arguments.
    """
    if family == "zero":
        return None
    if family == "attract-mean":
        s = float(params["strength"])
        k = lambda x, y, s=s: s * (np.asarray(y, float) - np.asarray(x, float))
        # marks k(x,y) = s*(y-x) so ensemble drivers may use running means
        k.linear_strength = s
        return k
    if family == "gaussian-kernel":
        s = float(params["strength"])
        w = float(params["width"])
        return lambda x, y, s=s, w=w: s * np.exp(
            -((np.asarray(x, float) - np.asarray(y, float)) ** 2) / (2.0 * w * w)
        )
    raise ParameterError(f"unknown kernel family {family!r}")


# ---------------------------------------------------------------------------
# the model itself
# ---------------------------------------------------------------------------

@dataclass
class ModelSpec:
    """Coefficients of the interacting diffusion plus the tail order.

    ``G`` is the diffusion coefficient (uniformly elliptic unless a test
    deliberately switches diffusion off), ``b0`` the autonomous drift,
    ``k`` the pairwise interaction kernel (None means no interaction),
    ``a`` the waiting-time intensity with exact bounds [a_min, a_max],
    ``alpha`` the base tail order.  The domain is the computational window
    used by grid solvers and diagnostics.

    Coefficients are assumed twice continuously differentiable on the
    domain; the test suite probes this with finite-difference smoothness
    checks rather than enforcing it at runtime.
    """

    G: Callable
    b0: Callable
    a: Callable
    alpha: float
    k: Optional[Callable] = None
    domain: tuple = (-10.0, 10.0)
    a_min: float = 1.0
    a_max: float = 1.0
    g_min: float = field(default=0.0)
    dimension: int = 1

    def __post_init__(self):
        if self.dimension != 1:
            raise ParameterError("only dimension 1 is supported")
        if not (0.0 < self.alpha < 1.0):
            raise ParameterError("alpha must lie in (0,1)")
        if not (0.0 < self.a_min <= self.a_max < np.inf):
            raise ParameterError("need 0 < a_min <= a_max < inf")
        if self.alpha * self.a_max >= 1.0:
            raise ParameterError(
                f"alpha*a_max = {self.alpha * self.a_max:.6g} must stay below 1"
            )
        if self.g_min < 0.0:
            raise ParameterError("g_min must be nonnegative")

    # -- construction -------------------------------------------------------

    @classmethod
    def from_config(cls, cfg: dict) -> "ModelSpec":
        """Build a model from a flat configuration mapping.

        Recognised keys (with defaults): model.G / model.b0 / model.a family
        selectors plus their numeric parameters, model.k kernel selector,
        model.alpha, model.domain_lo, model.domain_hi.  See the README for
        the full schema.
        """
        def fam(prefix, default_family, default_params):
            family = cfg.get(f"{prefix}.family", default_family)
            params = {
                key.rsplit(".", 1)[1]: val
                for key, val in cfg.items()
                if key.startswith(prefix + ".") and key != f"{prefix}.family"
            }
            return family, (params or dict(default_params))

        g_fam, g_par = fam("model.G", "constant", {"value": 1.0})
        b_fam, b_par = fam("model.b0", "zero", {})
        a_fam, a_par = fam("model.a", "constant", {"value": 1.0})
        k_fam, k_par = fam("model.k", "zero", {})
        G, g_meta = make_coefficient(g_fam, **g_par)
        b0, _ = make_coefficient(b_fam, **b_par)
        a, a_meta = make_coefficient(a_fam, **a_par)
        k = make_kernel(k_fam, **k_par)
        lo = float(cfg.get("model.domain_lo", -10.0))
        hi = float(cfg.get("model.domain_hi", 10.0))
        grid = np.linspace(lo, hi, 513)

        def bounds(meta, fn):
            if "min" in meta:
                return meta["min"], meta["max"]
            vals = fn(grid)
            return float(vals.min()), float(vals.max())

        a_lo, a_hi = bounds(a_meta, a)
        g_lo, _ = bounds(g_meta, G)
        return cls(
            G=G, b0=b0, a=a, k=k,
            alpha=float(cfg.get("model.alpha", 0.5)),
            domain=(lo, hi),
            a_min=a_lo, a_max=a_hi, g_min=max(g_lo, 0.0),
        )

    # -- derived quantities -------------------------------------------------

    def drift(self, x, mu) -> np.ndarray:
        """Mean-field drift b_mu(x) = b0(x) + integral k(x,y) mu(dy)."""
        scalar = np.ndim(x) == 0
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.asarray(self.b0(x), dtype=float)
        if self.k is not None:
            if isinstance(mu, EmpiricalMeasure):
                y = mu.positions
                out = out + np.mean(self.k(x[:, None], y[None, :]), axis=-1)
            elif isinstance(mu, GridDensity):
                y = mu.centers
                weights = mu.values * mu.dx
                out = out + self.k(x[:, None], y[None, :]) @ weights
            else:
                raise ParameterError(f"unsupported measure type {type(mu).__name__}")
        return float(out[0]) if scalar else out

    def intensity_pairing(self, mu) -> float:
        """(a, mu): the average intensity under mu."""
        return mu.pair(self.a)


def total_intensity(config: EmpiricalMeasure, spec: ModelSpec) -> float:
    """A(x) = sum of a over the atoms; (a, mu) equals A(x)/N."""
    return float(np.sum(spec.a(config.positions)))


def mean_field_drift(x, mu, spec: ModelSpec):
    """b_mu(x) for either measure representation (atom average / midpoint rule)."""
    return spec.drift(x, mu)


def order_of(mu, spec: ModelSpec) -> float:
    """Effective tail order alpha * (a, mu); inside (0,1) under the invariants."""
    return spec.alpha * spec.intensity_pairing(mu)


# ---------------------------------------------------------------------------
# test functionals
# ---------------------------------------------------------------------------

LINEAR = "linear"
QUADRATIC = "quadratic"


@dataclass
class TestFunctional:
    """F(mu) = (f,mu) or (f,mu)**2, optionally times a time factor psi(s).

    Carries closed-form derivatives of f (and psi) so generator and
    residual computations never need numerical differentiation of the
    functional itself.  ``support_end`` declares that psi vanishes at and
    beyond that time, which lets tail integrals be done in closed form.
    """

    kind: str
    f: Callable
    df: Optional[Callable] = None
    d2f: Optional[Callable] = None
    s_factor: Optional[Callable] = None
    ds_factor: Optional[Callable] = None
    support_end: Optional[float] = None
    label: str = ""

    # not a pytest case despite the name
    __test__ = False

    def __post_init__(self):
        if self.kind not in (LINEAR, QUADRATIC):
            raise ParameterError("kind must be 'linear' or 'quadratic'")

    @classmethod
    def linear(cls, f, df=None, d2f=None, **kw):
        return cls(LINEAR, f, df, d2f, **kw)

    @classmethod
    def quadratic(cls, f, df=None, d2f=None, **kw):
        return cls(QUADRATIC, f, df, d2f, **kw)

    def mu_value(self, mu) -> float:
        """The measure part F(mu)."""
        p = mu.pair(self.f)
        return p * p if self.kind == QUADRATIC else p

    def value(self, mu, s: float = None) -> float:
        """F(mu, s) = F(mu) * psi(s) when a time factor is attached."""
        v = self.mu_value(mu)
        if self.s_factor is not None:
            if s is None:
                raise ParameterError("functional carries a time factor; s required")
            v *= float(self.s_factor(s))
        return v

    def time_value(self, s: float) -> float:
        return 1.0 if self.s_factor is None else float(self.s_factor(s))

    def variational(self, mu):
        """Closed-form variational derivative and its two derivatives.

        Returns (phi, phi', phi'') as callables: phi = f for the linear
        kind, phi = 2 (f,mu) f for the quadratic kind.
        """
        if self.df is None or self.d2f is None:
            raise ParameterError(
                "functional lacks analytic derivatives of f (df/d2f required)"
            )
        if self.kind == LINEAR:
            return self.f, self.df, self.d2f
        c = 2.0 * mu.pair(self.f)
        return (
            lambda x, c=c: c * self.f(x),
            lambda x, c=c: c * self.df(x),
            lambda x, c=c: c * self.d2f(x),
        )
