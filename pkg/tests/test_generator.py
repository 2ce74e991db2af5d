import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qbsde.errors import BracketError, ValidationError
from qbsde.generator import (
    InfConvolutionSearch,
    SamplePlan,
    affine_in_y,
    check_assumptions,
    custom_generator,
    entropic_linear_y,
    eval_generator,
    inf_convolution,
    lipschitz_approximant,
    pure_quadratic,
)

reals = st.floats(-6.0, 6.0, allow_nan=False)


def square(t, x, y, z):
    # g(z) = z^2, i.e. the pure-quadratic family with gamma = 2
    return np.sum(np.square(z), axis=-1) + 0.0 * np.asarray(y)


class TestEval:
    def test_pure_quadratic_examples(self):
        g = pure_quadratic(1.0)
        assert eval_generator(g, 0.0, None, 0.0, [2.0]) == 2.0
        assert eval_generator(g, 0.0, None, 0.0, [0.0]) == 0.0

    def test_affine_identity_in_y(self):
        g = affine_in_y(a=1.0)
        assert eval_generator(g, 0.0, None, 3.0, [17.0]) == 3.0

    def test_entropic_with_linear_y(self):
        g = entropic_linear_y(2.0, 0.5, alpha0=1.0)
        assert eval_generator(g, 0.3, None, 2.0, [1.0]) == pytest.approx(1.0 + 1.0 + 1.0)

    def test_vectorised_matches_pointwise(self, rng):
        g = entropic_linear_y(1.5, -0.3, 0.2, dim=2)
        y = rng.normal(size=7)
        z = rng.normal(size=(7, 2))
        vec = g(0.0, None, y, z)
        for i in range(7):
            assert vec[i] == pytest.approx(eval_generator(g, 0.0, None, y[i], z[i]), abs=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            eval_generator(pure_quadratic(1.0, dim=2), 0.0, None, 0.0, [1.0])

    @pytest.mark.parametrize("bad", [(math.nan, [0.0]), (0.0, [math.inf])])
    def test_non_finite_inputs(self, bad):
        with pytest.raises(ValidationError):
            eval_generator(pure_quadratic(1.0), 0.0, None, bad[0], bad[1])

    def test_constants_validated(self):
        with pytest.raises(ValidationError):
            pure_quadratic(0.0)
        with pytest.raises(ValidationError):
            custom_generator(square, gamma_bar=1.0, K_gy=-1.0)


class TestAssumptions:
    @pytest.mark.parametrize("spec", [
        pure_quadratic(1.0),
        pure_quadratic(2.5, dim=3),
        entropic_linear_y(1.0, 0.7, 0.4),
        entropic_linear_y(2.0, -0.5, -1.0, dim=2),
        affine_in_y(1.0, [0.5], -0.2),
        affine_in_y(-2.0, [0.3, -0.4], 1.0, dim=2),
    ])
    def test_builtin_families_pass_every_clause(self, spec):
        rep = check_assumptions(spec, SamplePlan(n_samples=1500, x_dim=1))
        assert rep.passed, rep.as_dict()
        assert all(c.worst_violation <= 1e-10 for c in rep.clauses.values())

    def test_pure_quadratic_lipschitz_witness_is_zero(self):
        rep = check_assumptions(pure_quadratic(1.0))
        assert rep.clauses["lipschitz_y"].witness == 0.0

    def test_concave_driver_fails_convexity(self):
        g = custom_generator(lambda t, x, y, z: -np.sum(np.square(z), axis=-1), gamma_bar=1.0, r=10.0,
                             alpha_low=100.0, y_dependent=False)
        rep = check_assumptions(g)
        assert not rep.clauses["convexity_z"].passed
        assert rep.clauses["convexity_z"].witness > 0

    def test_concave_midpoint_value(self):
        # midpoint gap at z=0, z'=2 for g=-z^2: -1 + 2 = 1
        g = lambda z: -z * z  # noqa: E731
        assert g(1.0) - 0.5 * (g(0.0) + g(2.0)) == 1.0

    def test_sine_in_y_lipschitz_clause(self):
        g = custom_generator(lambda t, x, y, z: np.sin(y) + 0.5 * np.sum(np.square(z), axis=-1),
                             gamma_bar=1.0, beta_bar=1.0, alpha_bar=1.0, K_gy=1.0, r=1.0, alpha_low=1.0,
                             monotonicity_beta=1.0)
        rep = check_assumptions(g)
        assert rep.clauses["lipschitz_y"].passed
        assert rep.clauses["lipschitz_y"].witness <= 1.0
        assert rep.passed

    def test_understated_lipschitz_constant_is_reported(self):
        g = custom_generator(lambda t, x, y, z: 2.0 * y + 0.5 * np.sum(np.square(z), axis=-1),
                             gamma_bar=1.0, beta_bar=2.0, K_gy=1.0, r=2.0, monotonicity_beta=2.0)
        rep = check_assumptions(g)
        assert not rep.clauses["lipschitz_y"].passed
        assert rep.clauses["lipschitz_y"].witness == pytest.approx(2.0)


class TestInfConvolution:
    def test_examples_analytic(self):
        g = pure_quadratic(2.0)
        assert inf_convolution(g, 2, 0.0, None, 0.0, [0.5]) == pytest.approx(0.25, abs=1e-12)
        assert inf_convolution(g, 2, 0.0, None, 0.0, [3.0]) == pytest.approx(5.0, abs=1e-12)

    def test_examples_numeric_custom(self):
        g = custom_generator(square, gamma_bar=2.0, y_dependent=False)
        assert inf_convolution(g, 2, 0.0, None, 0.0, [0.5]) == pytest.approx(0.25, abs=1e-6)
        assert inf_convolution(g, 2, 0.0, None, 0.0, [3.0]) == pytest.approx(5.0, abs=1e-6)

    def test_forced_numeric_matches_closed_form(self):
        g = pure_quadratic(2.0)
        search = InfConvolutionSearch(force_numeric=True)
        for z in (-4.0, -0.7, 0.0, 0.4, 1.0, 2.5):
            assert inf_convolution(g, 2, 0.0, None, 0.0, [z], search) == pytest.approx(
                inf_convolution(g, 2, 0.0, None, 0.0, [z]), abs=1e-6)

    def test_value_at_global_minimiser(self):
        g = custom_generator(lambda t, x, y, z: (z[..., 0] - 1.0) ** 2 + 0.5 + 0.0 * y, gamma_bar=2.0,
                             alpha_bar=5.0, y_dependent=False)
        assert inf_convolution(g, 3, 0.0, None, 0.0, [1.0]) == pytest.approx(0.5, abs=1e-9)

    def test_numeric_y_dependent(self):
        g = entropic_linear_y(1.0, 0.5, 0.0)
        search = InfConvolutionSearch(force_numeric=True)
        for y, z in ((1.0, 0.5), (-2.0, 3.0), (0.3, -6.0)):
            assert inf_convolution(g, 4, 0.0, None, y, [z], search) == pytest.approx(
                inf_convolution(g, 4, 0.0, None, y, [z]), abs=1e-6)

    def test_too_small_search_box_raises(self):
        g = custom_generator(square, gamma_bar=2.0, y_dependent=False)
        with pytest.raises(BracketError):
            inf_convolution(g, 2, 0.0, None, 0.0, [3.0], InfConvolutionSearch(radius=0.1))

    def test_n_below_slope_rejected(self):
        with pytest.raises(ValidationError):
            inf_convolution(entropic_linear_y(1.0, 3.0), 2, 0.0, None, 0.0, [0.0])
        with pytest.raises(ValidationError):
            inf_convolution(pure_quadratic(1.0), 0, 0.0, None, 0.0, [0.0])

    @settings(max_examples=200, deadline=None)
    @given(z=reals, n=st.integers(1, 8), dn=st.integers(1, 8))
    def test_monotone_ladder(self, z, n, dn):
        g = pure_quadratic(2.0)
        lo = inf_convolution(g, n, 0.0, None, 0.0, [z])
        hi = inf_convolution(g, n + dn, 0.0, None, 0.0, [z])
        assert lo <= hi + 1e-9
        assert hi <= eval_generator(g, 0.0, None, 0.0, [z]) + 1e-9

    @settings(max_examples=200, deadline=None)
    @given(z1=reals, z2=reals, y1=reals, y2=reals, n=st.integers(1, 8))
    def test_lipschitz_certificate(self, z1, z2, y1, y2, n):
        g = entropic_linear_y(1.0, 0.5, 0.1)
        a = inf_convolution(g, n, 0.0, None, y1, [z1])
        b = inf_convolution(g, n, 0.0, None, y2, [z2])
        assert abs(a - b) <= n * (abs(y1 - y2) + abs(z1 - z2)) + 1e-9

    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(1, 10), frac=st.floats(-1.0, 1.0))
    def test_exactness_window(self, n, frac):
        z = frac * n / 2.0
        g = pure_quadratic(2.0)
        assert inf_convolution(g, n, 0.0, None, 0.0, [z]) == pytest.approx(z * z, abs=1e-12)

    def test_lipschitz_approximant_spec(self, rng):
        g = entropic_linear_y(1.0, 0.5, 0.2)
        gn = lipschitz_approximant(g, 4)
        y = rng.normal(size=50)
        z = rng.normal(scale=4.0, size=(50, 1))
        vec = gn(0.0, None, y, z)
        for i in range(50):
            assert vec[i] == pytest.approx(inf_convolution(g, 4, 0.0, None, y[i], z[i]), abs=1e-12)
        assert gn.K_gy == g.K_gy
        assert gn.kind == "inf-convolution"

    def test_lipschitz_approximant_of_lipschitz_driver_is_itself(self, rng):
        g = affine_in_y(0.5, [0.3], 0.1)
        gn = lipschitz_approximant(g, 2)
        y = rng.normal(size=20)
        z = rng.normal(size=(20, 1))
        np.testing.assert_allclose(gn(0.0, None, y, z), g(0.0, None, y, z), atol=1e-12)
