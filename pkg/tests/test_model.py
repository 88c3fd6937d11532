import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import build_spec, gaussian_atoms, sin_functional
from fractional_kinetics.errors import ParameterError
from fractional_kinetics.model import (
    EmpiricalMeasure,
    GridDensity,
    ModelSpec,
    TestFunctional,
    make_coefficient,
    make_kernel,
    mean_field_drift,
    order_of,
    total_intensity,
)


class TestEmpiricalMeasure:
    def test_pairing_is_atom_average(self):
        mu = EmpiricalMeasure([0.0, 1.0, 2.0, 3.0])
        assert mu.pair(lambda x: x) == 1.5

    def test_histogram_preserves_mass(self):
        mu = gaussian_atoms(333)
        grid = mu.to_grid(-6, 6, 57)
        assert abs(grid.mass() - 1.0) < 1e-14

    def test_histogram_rejects_out_of_domain(self):
        with pytest.raises(ParameterError):
            EmpiricalMeasure([0.0, 10.0]).to_grid(-1, 1, 10)


class TestGridDensity:
    def test_mass_invariant_enforced(self):
        with pytest.raises(ParameterError):
            GridDensity(0, 1, np.full(10, 2.0))
        with pytest.raises(ParameterError):
            GridDensity(0, 1, -np.ones(10))

    def test_midpoint_pairing_second_order(self):
        # (x^3, mu) for the uniform density on [0,1] is 1/4 exactly
        errs = []
        for cells in (50, 100):
            gd = GridDensity.from_function(lambda x: np.ones_like(x), 0, 1, cells)
            errs.append(abs(gd.pair(lambda x: x**3) - 0.25))
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)

    def test_quantile_positions_match_distribution(self):
        gd = GridDensity.from_function(lambda x: np.ones_like(x), 0, 1, 64)
        pos = gd.quantile_positions(8)
        assert np.allclose(pos, (np.arange(8) + 0.5) / 8, atol=1e-12)


class TestIntensityAndOrder:
    def test_constant_intensity(self):
        spec = build_spec(a=1.0)
        mu = EmpiricalMeasure(np.zeros(5))
        assert total_intensity(mu, spec) == 5.0
        assert spec.intensity_pairing(mu) == 1.0

    def test_sine_intensity_hand_evaluation(self):
        a, meta = make_coefficient("sine", base=2.0, amplitude=1.0)
        G, _ = make_coefficient("constant", value=1.0)
        b0, _ = make_coefficient("zero")
        spec = ModelSpec(G=G, b0=b0, a=a, alpha=0.3, a_min=1.0, a_max=3.0, g_min=1.0)
        mu = EmpiricalMeasure([0.0, np.pi / 2])
        assert total_intensity(mu, spec) == pytest.approx(5.0, abs=1e-14)

    def test_single_atom(self):
        spec = build_spec(a=2.5, alpha=0.3)
        assert total_intensity(EmpiricalMeasure([0.7]), spec) == pytest.approx(2.5)

    def test_order_constant_intensity_gives_alpha(self):
        spec = build_spec(a=1.0, alpha=0.37)
        assert order_of(gaussian_atoms(11), spec) == pytest.approx(0.37)

    def test_order_affine_intensity_pairing_arithmetic(self):
        # alpha * (a, mu) with a = 1+x and mu uniform on [0,1] is
        # 0.5 * 1.5 = 0.75 (exact: midpoint rule is exact for affine a)
        gd = GridDensity.from_function(lambda x: np.ones_like(x), 0, 1, 64)
        assert 0.5 * gd.pair(lambda x: 1.0 + x) == pytest.approx(0.75, abs=1e-13)

    def test_order_affine_on_valid_domain(self):
        a, _ = make_coefficient("affine", intercept=1.0, slope=1.0)
        G, _ = make_coefficient("constant", value=1.0)
        b0, _ = make_coefficient("zero")
        spec = ModelSpec(G=G, b0=b0, a=a, alpha=0.5, domain=(0.0, 0.8),
                         a_min=1.0, a_max=1.8, g_min=1.0)
        gd = GridDensity.from_function(lambda x: np.ones_like(x), 0.0, 0.8, 80)
        assert order_of(gd, spec) == pytest.approx(0.5 * 1.4, abs=1e-13)

    @settings(max_examples=40, deadline=None)
    @given(alpha=st.floats(0.05, 0.9), amp=st.floats(0.0, 0.4),
           seed=st.integers(0, 10**6))
    def test_order_always_in_unit_interval(self, alpha, amp, seed):
        base = 1.0
        if alpha * (base + amp) >= 1.0:
            alpha = 0.9 / (base + amp)
        spec = build_spec(a_sine=(base, amp), alpha=alpha)
        rng = np.random.default_rng(seed)
        mu = EmpiricalMeasure(rng.normal(size=7))
        assert 0.0 < order_of(mu, spec) < 1.0


class TestMeanFieldDrift:
    def test_no_interaction_returns_autonomous_part(self):
        spec = build_spec(b=0.3)
        assert mean_field_drift(1.0, gaussian_atoms(5), spec) == pytest.approx(0.3)

    def test_attraction_to_mean_two_atoms(self):
        spec = build_spec(kernel=1.0)
        mu = EmpiricalMeasure([0.0, 2.0])
        assert mean_field_drift(0.0, mu, spec) == pytest.approx(1.0)

    def test_grid_kernel_integral(self):
        # k(x,y) = y with uniform mu on [0,1]: drift = 1/2 exactly
        # (midpoint rule is exact for affine integrands)
        G, _ = make_coefficient("constant", value=1.0)
        b0, _ = make_coefficient("zero")
        a, _ = make_coefficient("constant", value=1.0)
        k = lambda x, y: np.asarray(y, float) + 0.0 * np.asarray(x, float)
        spec = ModelSpec(G=G, b0=b0, a=a, k=k, alpha=0.5,
                         a_min=1.0, a_max=1.0, g_min=1.0)
        gd = GridDensity.from_function(lambda x: np.ones_like(x), 0, 1, 37)
        assert mean_field_drift(0.3, gd, spec) == pytest.approx(0.5, abs=1e-13)

    def test_gaussian_kernel_family_broadcasts(self):
        k = make_kernel("gaussian-kernel", strength=0.5, width=1.0)
        out = k(np.zeros(3)[:, None], np.ones(4)[None, :])
        assert out.shape == (3, 4)
        assert np.allclose(out, 0.5 * np.exp(-0.5))


class TestModelInvariants:
    def test_alpha_a_max_product_must_stay_below_one(self):
        with pytest.raises(ParameterError):
            build_spec(a=2.0, alpha=0.5)

    def test_alpha_range(self):
        with pytest.raises(ParameterError):
            build_spec(alpha=1.2)

    def test_intensity_must_be_positive(self):
        G, _ = make_coefficient("constant", value=1.0)
        b0, _ = make_coefficient("zero")
        a, _ = make_coefficient("constant", value=1.0)
        with pytest.raises(ParameterError):
            ModelSpec(G=G, b0=b0, a=a, alpha=0.5, a_min=0.0, a_max=1.0, g_min=1.0)

    def test_coefficient_smoothness_smoke(self):
        # finite-difference second derivatives of the families stay bounded
        for fam, params in (("sine", dict(base=1.0, amplitude=0.3)),
                            ("affine", dict(intercept=1.0, slope=0.2)),
                            ("cosine-bump", dict(base=1.0, amplitude=0.1))):
            fn, _ = make_coefficient(fam, **params)
            x = np.linspace(-3, 3, 101)
            h = 1e-4
            d2 = (fn(x + h) - 2 * fn(x) + fn(x - h)) / h**2
            assert np.all(np.isfinite(d2)) and np.max(np.abs(d2)) < 10.0


class TestModelFromConfig:
    def test_families_and_bounds(self):
        spec = ModelSpec.from_config({
            "model.alpha": 0.4,
            "model.G.family": "constant", "model.G.value": 0.8,
            "model.b0.family": "linear-drift", "model.b0.rate": 0.5,
            "model.a.family": "sine", "model.a.base": 1.0, "model.a.amplitude": 0.2,
            "model.k.family": "gaussian-kernel", "model.k.strength": 0.1,
            "model.k.width": 2.0,
        })
        assert spec.a_min == pytest.approx(0.8)
        assert spec.a_max == pytest.approx(1.2)
        assert spec.k is not None
        assert spec.b0(2.0) == pytest.approx(-1.0)


class TestTestFunctional:
    def test_values_and_variational_forms(self):
        mu = EmpiricalMeasure([0.0, 2.0])
        lin = sin_functional("linear", freq=1.0)
        quad = sin_functional("quadratic", freq=1.0)
        p = 0.5 * np.sin(2.0)
        assert lin.mu_value(mu) == pytest.approx(p)
        assert quad.mu_value(mu) == pytest.approx(p**2)
        phi, dphi, _ = quad.variational(mu)
        assert phi(1.0) == pytest.approx(2 * p * np.sin(1.0))
        assert dphi(1.0) == pytest.approx(2 * p * np.cos(1.0))

    def test_time_factor_required_when_present(self):
        F = TestFunctional.linear(lambda x: np.asarray(x, float),
                                  s_factor=lambda s: np.exp(-s))
        with pytest.raises(ParameterError):
            F.value(EmpiricalMeasure([1.0]))
        assert F.value(EmpiricalMeasure([1.0]), 0.0) == pytest.approx(1.0)
