import numpy as np
import pytest

from gr2r import losses
from gr2r.estimators import Estimator
from gr2r.exceptions import ConfigError, DomainError, ShapeError, UnsupportedFamilyError
from gr2r.inverse_ops import ForwardOperator, Transform, TransformGroup, ROTATE
from gr2r.nef_models import NoiseModel, sample_noisy
from gr2r.splitters import SplitPair, split
from gr2r.verification import poisson_limit_gap, sure_limit_gaps


def _pair(rng, shape=(6, 6), alpha=0.5):
    model = NoiseModel.gaussian(0.1)
    y = sample_noisy(model, rng.uniform(0.2, 0.8, size=shape), rng)
    return split(model, y, alpha, rng)


class TestPairLosses:

    def test_gr2r_mse_is_n2n_on_the_split(self, rng):
        pair = _pair(rng)
        f = Estimator.affine(0.7, 0.1)
        assert losses.gr2r_mse(f, pair).value == losses.n2n_loss(f, pair.y1, pair.y2).value
        assert losses.gr2r_mse(f, pair).constant_convention == losses.DROPS_CONSTANTS

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            losses.sup_mse(Estimator.identity(), np.zeros((3, 3)), np.zeros((3, 4)))

    def test_non_finite_loss_is_rejected(self):
        with pytest.raises(DomainError):
            losses.LossValue(float('nan'))

    def test_gaussian_nll_equals_mse(self, rng):
        pair = _pair(rng)
        f = Estimator.affine(0.9, 0.02)
        model = NoiseModel.gaussian(0.1)
        assert losses.gr2r_nll(model, f, pair).value == losses.gr2r_mse(f, pair).value

    def test_poisson_nll_outside_domain(self):
        pair = SplitPair(y1=np.array([1.0, 2.0]), y2=np.array([1.0, 1.0]), alpha=0.5)
        with pytest.raises(DomainError):
            losses.gr2r_nll(NoiseModel.poisson(1.0), Estimator.affine(1.0, -1.5), pair)

    @pytest.mark.parametrize('model, v, t', [
        (NoiseModel.gaussian(0.1), 0.4, 0.7),
        (NoiseModel.poisson(0.5), 1.3, 2.0),
        (NoiseModel.gamma(5), 0.8, 1.1),
        (NoiseModel.binomial(10), 0.3, 0.6),
    ], ids=lambda v: str(v))
    def test_nll_derivative(self, model, v, t):
        h = 1e-6
        target = np.array([t])
        _, dv = losses.nll_terms(model, target, np.array([v]))
        up, _ = losses.nll_terms(model, target, np.array([v + h]))
        down, _ = losses.nll_terms(model, target, np.array([v - h]))
        assert float(dv[0]) == pytest.approx(float((up - down)[0]) / (2 * h), rel=1e-6)


class TestExpectedLoss:

    @pytest.mark.parametrize('model, x, alpha', [
        (NoiseModel.poisson(0.5), 1.0, 0.15),
        (NoiseModel.poisson(1.0), 2.0, 0.5),
        (NoiseModel.binomial(10), 0.3, 0.1),
    ], ids=lambda v: str(v))
    def test_mse_difference_is_unbiased(self, model, x, alpha):
        f, g = Estimator.identity(), Estimator.affine(0.5, 0.0)

        def exp(est, loss):
            return losses.expected_loss(model, est, loss, alpha, x=x).value

        lhs = exp(f, losses.GR2R_MSE) - exp(g, losses.GR2R_MSE)
        rhs = exp(f, losses.SUP_MSE) - exp(g, losses.SUP_MSE)
        assert lhs == pytest.approx(rhs, abs=1e-8)

    @pytest.mark.parametrize('model, x, alpha', [
        (NoiseModel.poisson(0.5), 2.0, 0.5),
        (NoiseModel.binomial(10), 0.5, 0.5),
    ], ids=lambda v: str(v))
    def test_nll_difference_is_unbiased(self, model, x, alpha):
        f, g = Estimator.affine(0.5, 0.2), Estimator.constant(0.5)

        def exp(est, loss):
            return losses.expected_loss(model, est, loss, alpha, x=x).value

        lhs = exp(f, losses.GR2R_NLL) - exp(g, losses.GR2R_NLL)
        rhs = exp(f, losses.SUP_NLL) - exp(g, losses.SUP_NLL)
        assert lhs == pytest.approx(rhs, abs=1e-8)

    def test_moments_method_agrees_with_monte_carlo(self):
        model = NoiseModel.gamma(5)
        x = np.array([0.5, 1.0, 1.5, 2.0])
        f = Estimator.affine(0.8, 0.1)
        exact = losses.expected_loss(model, f, losses.GR2R_MSE, 0.2, x=x, method='moments')
        sampled = losses.expected_loss(model, f, losses.GR2R_MSE, 0.2, x=x, method='monte-carlo',
                                       N=200000, seed=11)
        assert abs(exact.value - sampled.value) <= sampled.half_width

    def test_monte_carlo_does_not_depend_on_jobs(self):
        model = NoiseModel.poisson(0.5)
        f = Estimator.affine(0.9, 0.0)
        kwargs = dict(x=np.array([1.0, 2.0]), method='monte-carlo', N=4000, seed=3)
        serial = losses.expected_loss(model, f, losses.GR2R_MSE, 0.5, jobs=1, **kwargs)
        threaded = losses.expected_loss(model, f, losses.GR2R_MSE, 0.5, jobs=3, **kwargs)
        assert serial == threaded

    def test_enumeration_needs_discrete_family(self):
        with pytest.raises(UnsupportedFamilyError):
            losses.expected_loss(NoiseModel.gaussian(0.1), Estimator.identity(), losses.GR2R_MSE,
                                 0.5, x=np.array([0.5]))

    def test_supervised_needs_clean_target(self):
        with pytest.raises(ConfigError):
            losses.expected_loss(NoiseModel.poisson(1.0), Estimator.identity(), losses.SUP_MSE,
                                 0.5, y=np.array([1.0]))

    def test_monte_carlo_needs_enough_draws(self):
        with pytest.raises(ConfigError):
            losses.expected_loss(NoiseModel.gamma(5), Estimator.identity(), losses.GR2R_MSE,
                                 0.2, x=np.array([1.0]), method='monte-carlo', N=10)


class TestSteinLimits:

    def test_sure_monte_carlo_divergence_is_exact_for_affine(self, rng):
        y = rng.uniform(0.1, 0.9, size=(5, 5))
        f = Estimator.affine(0.7, 0.05)
        exact = losses.sure_gaussian(f, y, 0.1)
        sampled = losses.sure_gaussian(f, y, 0.1, div_mode=losses.DIV_MONTE_CARLO, rng=rng, probes=3)
        assert sampled.value == pytest.approx(exact.value, rel=1e-6)

    def test_sure_gaps_follow_closed_form(self):
        gaps = sure_limit_gaps(sigma=0.1, a=0.8)
        # (1 - a^2) * sigma^2 * n * alpha / (1 - alpha) for affine estimators
        expected = [0.36 * 0.01 * 16 * a / (1 - a) for a in (0.1, 0.03, 0.01)]
        np.testing.assert_allclose(gaps, expected, rtol=1e-6)
        assert gaps[-1] < 1e-3

    def test_poisson_gap_follows_closed_form(self):
        gap = poisson_limit_gap(alpha=0.01, gamma_gain=0.5, a=0.95, y=1.0)
        assert gap == pytest.approx((1 - 0.95 ** 2) * 0.5 * 0.01 / 0.99, rel=1e-6)
        assert gap < 1e-3

    def test_pure_limit_for_non_pixelwise_estimator(self, rng):
        y = 0.5 * rng.poisson(2.0, size=(4, 4)).astype(float)
        kernel = np.zeros((3, 3))
        kernel[1, 1] = 0.6
        kernel[0, 1] = 0.2
        conv = Estimator.convolution(kernel)
        value = losses.pure_limit_poisson(conv, y, 0.5).value
        out = conv(y)
        # each f_i moves by 0.6 * gamma when y_i drops by gamma
        expected = float(np.sum((out - y) ** 2)) + 2.0 * float(np.sum(y * 0.6 * 0.5))
        assert value == pytest.approx(expected, rel=1e-10)

    def test_gamma_series_first_coefficient_vanishes(self):
        assert losses.gamma_series_coefficient(5, 1) == 0.0
        assert 0.0 < losses.gamma_series_coefficient(5, 3) < 1.0

    def test_table_series_for_quadratic(self, rng):
        looks, c = 5, np.array([0.05, 0.9, 0.1])
        y = rng.uniform(0.5, 1.5, size=6)
        f = Estimator.polynomial(c)
        value = losses.sure_gamma_series(f, y, looks, K=4, fd_step=0.1).value
        residual = float(np.sum((f(y) - y) ** 2))
        correction = -c[2] * np.sum(y ** 3) / (looks + 1) ** 2
        assert value == pytest.approx(residual + 2.0 * correction, abs=1e-8)

    def test_beta_moment_series_matches_moments_gap(self, rng):
        looks, alpha, a = 5, 1e-3, 0.9
        model = NoiseModel.gamma(looks)
        y = rng.uniform(0.5, 1.5, size=8)
        f, g = Estimator.affine(a, 0.02), Estimator.identity()
        exact = (losses.expected_loss(model, f, losses.GR2R_MSE, alpha, y=y, method='moments').value
                 - losses.expected_loss(model, g, losses.GR2R_MSE, alpha, y=y, method='moments').value)
        series = losses.BETA_MOMENT_COEFFICIENTS
        limit = (losses.sure_gamma_series(f, y, looks, coefficients=series, fd_step=0.1).value
                 - losses.sure_gamma_series(g, y, looks, coefficients=series, fd_step=0.1).value)
        expected_gap = (1 - a ** 2) * np.sum(y ** 2) / (looks + 1) * alpha / (1 - alpha)
        assert abs(exact - limit) == pytest.approx(expected_gap, rel=1e-5)

    def test_table_series_omits_first_order_term(self, rng):
        looks, alpha, a = 5, 1e-3, 0.9
        model = NoiseModel.gamma(looks)
        y = rng.uniform(0.5, 1.5, size=8)
        f, g = Estimator.affine(a, 0.02), Estimator.identity()

        def gap(coefficients):
            return (losses.sure_gamma_series(f, y, looks, coefficients=coefficients, fd_step=0.1).value
                    - losses.sure_gamma_series(g, y, looks, coefficients=coefficients, fd_step=0.1).value)

        exact = (losses.expected_loss(model, f, losses.GR2R_MSE, alpha, y=y, method='moments').value
                 - losses.expected_loss(model, g, losses.GR2R_MSE, alpha, y=y, method='moments').value)
        first_order = 2.0 * (1 - a) * np.sum(y ** 2) / (looks + 1)
        table_gap = gap(losses.TABLE_COEFFICIENTS)
        assert table_gap - gap(losses.BETA_MOMENT_COEFFICIENTS) == pytest.approx(first_order, rel=1e-8)
        assert table_gap - exact == pytest.approx(first_order, rel=1e-2)

    def test_gamma_series_rejects_bad_truncation(self):
        with pytest.raises(ConfigError):
            losses.sure_gamma_series(Estimator.identity(), np.ones(3), 5, K=1)


class TestOperatorLosses:

    def test_identity_operator_matches_plain_loss(self, rng):
        pair = _pair(rng)
        f = Estimator.affine(0.9, 0.05)
        A = ForwardOperator.identity(pair.y1.shape)
        assert losses.gr2r_operator_mse(A, f, pair).value == losses.gr2r_mse(f, pair).value

    def test_ei_loss_fixed_points(self, rng):
        A = ForwardOperator.identity((4, 4))
        f = Estimator.identity()
        x = rng.standard_normal((4, 4))
        symmetric = x + np.rot90(x) + np.rot90(x, 2) + np.rot90(x, 3)
        rotations = TransformGroup([Transform(ROTATE, quarter_turns=k) for k in range(4)])
        assert losses.ei_loss(A, f, symmetric, rotations).value == 0.0
        assert losses.ei_loss(A, f, x, TransformGroup.shifts(1)).value == 0.0

    def test_ei_loss_with_fewer_measurements_than_pixels(self, rng):
        A = ForwardOperator.from_matrix(rng.standard_normal((8, 16)), (4, 4), (8,))
        x = rng.standard_normal((4, 4))
        group = TransformGroup.shifts(1)
        value = losses.ei_loss(A, Estimator.identity(), x, group).value
        M = A.dense()
        expected = np.mean([np.sum((M.T @ M @ g.apply(x).ravel() - g.apply(x).ravel()) ** 2)
                            for g in group.elements])
        assert value == pytest.approx(expected, rel=1e-10)

    def test_ei_loss_estimator_shape_mismatch(self, rng):
        A = ForwardOperator.identity((4, 4))
        with pytest.raises(ShapeError):
            losses.ei_loss(A, np.ravel, rng.standard_normal((4, 4)), TransformGroup.shifts(1))

    def test_dense_operator_training_objective(self, rng):
        A = ForwardOperator.from_matrix(rng.standard_normal((8, 16)) / 4, (4, 4), (8,))
        model = NoiseModel.gaussian(0.1)
        y_batch = A.apply(rng.uniform(0.2, 0.8, size=(2, 4, 4))) + 0.1 * rng.standard_normal((2, 8))
        builder = losses.make_loss_builder('gr2r_operator_mse', model, 0.5, operator=A,
                                           transforms=TransformGroup.shifts(1), ei_weight=0.5)
        objective = builder(y_batch, None, rng)
        assert np.isfinite(objective.value(Estimator.affine(0.9, 0.05)))

    def test_sure_training_is_gaussian_only(self):
        with pytest.raises(UnsupportedFamilyError):
            losses.make_loss_builder('sure', NoiseModel.poisson(1.0))

    def test_unknown_training_loss(self):
        with pytest.raises(ConfigError):
            losses.make_loss_builder('l1', NoiseModel.gaussian(0.1), 0.5)
