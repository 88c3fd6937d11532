import numpy as np
import pytest
from scipy import stats as sps

from fractional_kinetics.model import (
    EmpiricalMeasure,
    ModelSpec,
    TestFunctional,
    make_coefficient,
    make_kernel,
)


def build_spec(g=1.0, b=0.0, a=1.0, alpha=0.5, drift_rate=None, kernel=None,
               a_sine=None, domain=(-10.0, 10.0)):
    """Compact model builder for tests."""
    G, _ = make_coefficient("constant", value=g)
    if drift_rate is not None:
        b0, _ = make_coefficient("linear-drift", rate=drift_rate)
    elif b == 0.0:
        b0, _ = make_coefficient("zero")
    else:
        b0, _ = make_coefficient("constant", value=b)
    if a_sine is not None:
        base, amp = a_sine
        a_fn, meta = make_coefficient("sine", base=base, amplitude=amp)
        a_min, a_max = meta["min"], meta["max"]
    else:
        a_fn, _ = make_coefficient("constant", value=a)
        a_min = a_max = a
    k = make_kernel("attract-mean", strength=kernel) if kernel else None
    return ModelSpec(G=G, b0=b0, a=a_fn, k=k, alpha=alpha, domain=domain,
                     a_min=a_min, a_max=a_max, g_min=g)


def mean_functional():
    return TestFunctional.linear(
        lambda x: np.asarray(x, float),
        lambda x: np.ones_like(np.asarray(x, float)),
        lambda x: np.zeros_like(np.asarray(x, float)),
    )


def mass_functional():
    return TestFunctional.linear(
        lambda x: np.ones_like(np.asarray(x, float)),
        lambda x: np.zeros_like(np.asarray(x, float)),
        lambda x: np.zeros_like(np.asarray(x, float)),
    )


def square_functional():
    return TestFunctional.linear(
        lambda x: np.asarray(x, float) ** 2,
        lambda x: 2.0 * np.asarray(x, float),
        lambda x: np.full_like(np.asarray(x, float), 2.0),
    )


def sin_functional(kind="linear", freq=1.3, **kw):
    ctor = TestFunctional.linear if kind == "linear" else TestFunctional.quadratic
    return ctor(
        lambda x: np.sin(freq * np.asarray(x, float)),
        lambda x: freq * np.cos(freq * np.asarray(x, float)),
        lambda x: -freq * freq * np.sin(freq * np.asarray(x, float)),
        **kw,
    )


def quartic_bump(center, width):
    def psi(s):
        z = (np.asarray(s, float) - center) / width
        out = np.where(np.abs(z) < 1.0, (1.0 - z**2) ** 2, 0.0)
        return float(out) if np.ndim(s) == 0 else out

    def dpsi(s):
        z = (np.asarray(s, float) - center) / width
        out = np.where(np.abs(z) < 1.0, -4.0 * z * (1.0 - z**2) / width, 0.0)
        return float(out) if np.ndim(s) == 0 else out

    return psi, dpsi, center + width


def gaussian_atoms(n, loc=0.0, scale=1.0):
    q = (np.arange(n) + 0.5) / n
    return EmpiricalMeasure(sps.norm.ppf(q, loc=loc, scale=scale))


@pytest.fixture
def pure_drift_spec():
    return build_spec(g=0.0, b=1.0, a=1.0, alpha=0.5)
