"""Reproducible random streams and heavy-tail samplers.

Streams are built on the counter-based Philox generator keyed by
``(master_seed, stream_id)``: distinct keys give statistically independent
streams, and replaying a key reproduces the identical sequence regardless
of what other streams did in between.  The convention used throughout the
package is ``stream_id = replica (or path) index``.

Two special samplers live here:

* ``sample_pareto_waiting`` -- the power-tail waiting time with density
  ``beta * r**(-1-beta)`` on ``[1, inf)``,
* ``sample_onesided_stable`` -- the standard positive stable variable with
  Laplace transform ``exp(-lam**beta)``, via the Kanter representation.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

__all__ = [
    "RngStream",
    "pareto_quantile",
    "kanter_stable",
    "sample_pareto_waiting",
    "sample_onesided_stable",
]

# Guard for the open-interval uniforms used by the Kanter transform.
_U_EPS = 1e-16


@dataclass
class RngStream:
    """A value-like handle on one reproducible random stream.

    The underlying generator is created lazily from the key
    ``(master_seed, stream_id)`` and then advances with every draw.
    ``counter`` reports how many variates have been delivered so far,
    which makes replay checks cheap in tests.
    """

    master_seed: int
    stream_id: int = 0
    counter: int = field(default=0, compare=False)

    def __post_init__(self):
        self._gen = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            key = np.array([self.master_seed, self.stream_id], dtype=np.uint64)
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def uniform(self, size=None):
        """Uniform draws on [0, 1)."""
        self.counter += int(np.prod(size)) if size is not None else 1
        return self.generator.random(size)

    def exponential(self, size=None):
        """Standard exponential draws."""
        self.counter += int(np.prod(size)) if size is not None else 1
        return self.generator.standard_exponential(size)

    def normal(self, size=None):
        """Standard normal draws."""
        self.counter += int(np.prod(size)) if size is not None else 1
        return self.generator.standard_normal(size)

    def integers(self, low, high=None, size=None):
        self.counter += int(np.prod(size)) if size is not None else 1
        return self.generator.integers(low, high, size)

    def child(self, offset: int) -> "RngStream":
        """A fresh stream with a shifted id, for derived work items."""
        return RngStream(self.master_seed, self.stream_id + offset)


def _check_beta(beta):
    b = np.asarray(beta, dtype=float)
    if np.any(b <= 0.0) or np.any(b >= 1.0):
        raise ParameterError(f"tail order must lie in (0,1), got {beta}")


def pareto_quantile(u, beta):
    """Inverse CDF of the unit-threshold Pareto law with tail index beta.

    For U uniform on (0, 1], ``U**(-1/beta)`` has density
    ``beta * r**(-1-beta)`` on [1, inf).
    """
    _check_beta(beta)
    return np.asarray(u, dtype=float) ** (-1.0 / beta)


def kanter_stable(u, w, beta):
    """Kanter transform of (uniform, exponential) into a positive stable.

    With U uniform on (0,1) and W standard exponential,

        sigma = sin(beta*pi*U) * sin((1-beta)*pi*U)**((1-beta)/beta)
                / sin(pi*U)**(1/beta) * W**(-(1-beta)/beta)

    has Laplace transform ``exp(-lam**beta)``.  Exact and O(1) per draw.
    """
    _check_beta(beta)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    frac = (1.0 - beta) / beta
    num = np.sin(beta * np.pi * u) * np.sin((1.0 - beta) * np.pi * u) ** frac
    den = np.sin(np.pi * u) ** (1.0 / beta)
    return (num / den) * w ** (-frac)


def sample_pareto_waiting(beta, rng, size=None):
    """Draw waiting times with density ``beta * r**(-1-beta)`` on [1, inf).

    The mean is infinite for beta < 1; every sample is >= 1.
    ``rng`` may be an RngStream or a numpy Generator.
    """
    _check_beta(beta)
    gen = rng if isinstance(rng, np.random.Generator) else None
    if gen is None:
        u = rng.uniform(size)
    else:
        u = gen.random(size)
    # map [0,1) to (0,1] so the quantile is finite
    return pareto_quantile(1.0 - u, beta)


def sample_onesided_stable(beta, rng, size=None):
    """Draw standard positive stable variates, E exp(-lam*X) = exp(-lam**beta)."""
    _check_beta(beta)
    if isinstance(rng, np.random.Generator):
        u = rng.random(size)
        w = rng.standard_exponential(size)
    else:
        u = rng.uniform(size)
        w = rng.exponential(size)
    u = np.clip(u, _U_EPS, 1.0 - _U_EPS)
    w = np.maximum(w, _U_EPS)
    return kanter_stable(u, w, beta)
