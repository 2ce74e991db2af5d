import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import BUILTIN_FAMILIES, fenchel_suite, fenchel_suite_passes
from qbsde.errors import InfiniteValueError, SubgradientCertificateError, ValidationError
from qbsde.fenchel import DualGeneratorView, ExtendedReal, fenchel_transform, fenchel_young_gap, subdifferential_select
from qbsde.generator import custom_generator, entropic_linear_y, pure_quadratic

qs = st.floats(-4.0, 4.0, allow_nan=False)


def abs_driver():
    return custom_generator(lambda t, x, y, z: np.abs(z[..., 0]) + 0.0 * y, gamma_bar=1.0, alpha_bar=0.5,
                            y_dependent=False)


class TestExtendedReal:
    def test_infinite_carries_no_payload(self):
        assert ExtendedReal.of(math.inf) == ExtendedReal.INF
        assert ExtendedReal.INF.value == 0.0
        assert float(ExtendedReal.INF) == math.inf

    def test_arithmetic(self):
        assert ExtendedReal.of(2.0) + 1.0 == 3.0
        assert 5.0 - ExtendedReal.of(2.0) == 3.0
        with pytest.raises(InfiniteValueError):
            ExtendedReal.INF + 1.0
        with pytest.raises(InfiniteValueError):
            ExtendedReal.of(1.0) - ExtendedReal.INF

    def test_comparisons_allowed(self):
        assert ExtendedReal.of(1e300) < ExtendedReal.INF
        assert ExtendedReal.of(-1.0) < 0.0

    @pytest.mark.parametrize("bad", [math.nan, -math.inf])
    def test_rejects_values_outside_codomain(self, bad):
        with pytest.raises(ValidationError):
            ExtendedReal.of(bad)


class TestTransform:
    def test_pure_quadratic_example(self):
        view = DualGeneratorView(pure_quadratic(1.0))
        assert fenchel_transform(view, 0.0, None, 0.0, [2.0]) == 2.0
        assert fenchel_transform(view, 0.0, None, 0.0, [0.0]) == 0.0

    def test_pure_quadratic_numeric_grid(self):
        view = DualGeneratorView(pure_quadratic(1.0), analytic=False)
        assert float(fenchel_transform(view, 0.0, None, 0.0, [2.0])) == pytest.approx(2.0, abs=1e-6)
        # independent dense grid maximisation
        z = np.linspace(-10, 10, 200001)
        assert np.max(2.0 * z - 0.5 * z * z) == pytest.approx(2.0, abs=1e-8)

    def test_absolute_value_indicator(self):
        view = DualGeneratorView(abs_driver())
        assert float(fenchel_transform(view, 0.0, None, 0.0, [0.5])) == pytest.approx(0.0, abs=1e-9)
        assert fenchel_transform(view, 0.0, None, 0.0, [2.0]) == ExtendedReal.INF
        assert not fenchel_transform(view, 0.0, None, 0.0, [-1.5]).finite

    def test_q_zero_is_minus_inf_of_g(self):
        g = entropic_linear_y(1.0, 0.5, 0.3)
        view = DualGeneratorView(g)
        assert float(fenchel_transform(view, 0.0, None, 2.0, [0.0])) == pytest.approx(-(0.3 + 0.5 * 2.0))

    @pytest.mark.parametrize("name", sorted(BUILTIN_FAMILIES))
    def test_analytic_matches_numeric(self, name):
        spec = BUILTIN_FAMILIES[name]
        fast, slow = DualGeneratorView(spec), DualGeneratorView(spec, analytic=False)
        rng = np.random.default_rng(1)
        for _ in range(15):
            y = rng.uniform(-3, 3)
            q = rng.uniform(-3, 3, 1)
            if name == "affine-in-y" and rng.random() < 0.5:
                q = np.asarray(spec.params["b"])
            a = fenchel_transform(fast, 0.2, None, y, q)
            b = fenchel_transform(slow, 0.2, None, y, q)
            assert a.finite == b.finite
            if a.finite:
                assert float(a) == pytest.approx(float(b), abs=1e-6)

    def test_two_dimensional_numeric(self):
        spec = pure_quadratic(2.0, dim=2)
        slow = DualGeneratorView(spec, analytic=False)
        q = np.array([1.0, -2.0])
        assert float(fenchel_transform(slow, 0.0, None, 0.0, q)) == pytest.approx(5.0 / 4.0, abs=1e-6)

    def test_wrong_dimension(self):
        with pytest.raises(ValidationError):
            fenchel_transform(DualGeneratorView(pure_quadratic(1.0)), 0.0, None, 0.0, [1.0, 2.0])

    @settings(max_examples=150, deadline=None)
    @given(q1=qs, q2=qs, y=qs)
    def test_convex_in_q(self, q1, q2, y):
        view = DualGeneratorView(entropic_linear_y(0.7, -0.4, 0.1))
        f = lambda q: float(fenchel_transform(view, 0.0, None, y, [q]))  # noqa: E731
        assert f(0.5 * (q1 + q2)) <= 0.5 * (f(q1) + f(q2)) + 1e-9

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_convex_in_q_numeric_custom(self):
        g = custom_generator(lambda t, x, y, z: np.cosh(z[..., 0]) + 0.0 * y, gamma_bar=4.0, alpha_bar=2.0,
                             y_dependent=False)
        view = DualGeneratorView(g)
        rng = np.random.default_rng(0)
        for _ in range(10):
            q1, q2 = rng.uniform(-3, 3, 2)
            f = [float(fenchel_transform(view, 0.0, None, 0.0, [q])) for q in (q1, 0.5 * (q1 + q2), q2)]
            assert f[1] <= 0.5 * (f[0] + f[2]) + 1e-7
        # cosh conjugate: q asinh(q) - sqrt(1 + q^2)
        q = 1.3
        exact = q * math.asinh(q) - math.sqrt(1 + q * q)
        assert float(fenchel_transform(view, 0.0, None, 0.0, [q])) == pytest.approx(exact, abs=1e-6)


class TestSubdifferential:
    def test_examples(self):
        np.testing.assert_allclose(subdifferential_select(DualGeneratorView(pure_quadratic(1.0)), 0, None, 0, [3.0]), [3.0])
        np.testing.assert_allclose(subdifferential_select(DualGeneratorView(pure_quadratic(2.0)), 0, None, 0, [1.0]), [2.0])

    def test_kink_takes_minimal_norm_member(self):
        q = subdifferential_select(DualGeneratorView(abs_driver()), 0.0, None, 0.0, [0.0])
        assert q == pytest.approx([0.0], abs=1e-12)

    def test_off_kink_absolute_value(self):
        view = DualGeneratorView(abs_driver())
        assert subdifferential_select(view, 0.0, None, 0.0, [1.5]) == pytest.approx([1.0], abs=1e-6)
        assert subdifferential_select(view, 0.0, None, 0.0, [-0.2]) == pytest.approx([-1.0], abs=1e-6)

    def test_numeric_matches_analytic(self):
        spec = entropic_linear_y(1.3, 0.2, 0.0)
        for z in (-2.0, 0.0, 0.7):
            a = subdifferential_select(DualGeneratorView(spec), 0.0, None, 1.0, [z])
            b = subdifferential_select(DualGeneratorView(spec, analytic=False), 0.0, None, 1.0, [z])
            assert a == pytest.approx(b, abs=1e-6)

    def test_non_convex_driver_fails_certificate(self):
        g = custom_generator(lambda t, x, y, z: -np.sum(z * z, axis=-1) + 0.0 * y, gamma_bar=1.0, y_dependent=False)
        with pytest.raises(SubgradientCertificateError):
            subdifferential_select(DualGeneratorView(g), 0.0, None, 0.0, [1.0])

    def test_misdeclared_gradient_fails_certificate(self):
        g = custom_generator(lambda t, x, y, z: 0.5 * np.sum(z * z, axis=-1) + 0.0 * y, gamma_bar=1.0,
                             y_dependent=False, gradient=lambda t, x, y, z: 2.0 * z)
        with pytest.raises(SubgradientCertificateError):
            subdifferential_select(DualGeneratorView(g), 0.0, None, 0.0, [1.0])


class TestGap:
    def test_examples(self):
        view = DualGeneratorView(pure_quadratic(1.0))
        assert fenchel_young_gap(view, 0, None, 0, [2.0], [2.0]) == pytest.approx(0.0)
        assert fenchel_young_gap(view, 0, None, 0, [1.0], [0.0]) == pytest.approx(0.5)
        assert fenchel_young_gap(view, 0, None, 0, [0.0], [0.0]) == 0.0

    def test_infinite_f_rejected(self):
        with pytest.raises(InfiniteValueError):
            fenchel_young_gap(DualGeneratorView(abs_driver()), 0, None, 0, [0.0], [3.0])

    @settings(max_examples=200, deadline=None)
    @given(z=qs, q=qs, y=qs)
    def test_nonnegative(self, z, q, y):
        view = DualGeneratorView(entropic_linear_y(1.2, 0.3, -0.5))
        assert fenchel_young_gap(view, 0.5, None, y, [z], [q]) >= -1e-9

    @pytest.mark.parametrize("name", sorted(BUILTIN_FAMILIES))
    def test_invariant_suite(self, name):
        res = fenchel_suite(BUILTIN_FAMILIES[name], draws=1500, seed=5)
        assert fenchel_suite_passes(res), res
