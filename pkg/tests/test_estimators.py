import numpy as np
import pytest

from gr2r.estimators import (
    RANGE_POSITIVE, RANGE_UNIT, Estimator, TrainConfig, TrainingData,
    central_difference, fd_derivative, train,
)
from gr2r.exceptions import ConfigError, DivergenceError, ShapeError
from gr2r.losses import make_loss_builder
from gr2r.nef_models import NoiseModel


def _estimators():
    kernel = np.array([[0.0, 0.1, 0.0], [0.2, 0.5, 0.1], [0.0, 0.05, 0.0]])
    return [
        Estimator.constant(0.3),
        Estimator.affine(np.linspace(0.5, 1.0, 16).reshape(4, 4), 0.1),
        Estimator.polynomial([0.1, 0.8, -0.2], RANGE_POSITIVE),
        Estimator.affine(1.5, -0.6, RANGE_UNIT),
        Estimator.convolution(kernel),
    ]


class TestEvaluation:

    def test_polynomial_degree_limit(self):
        with pytest.raises(ConfigError):
            Estimator.polynomial(np.ones(6))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            Estimator.convolution(np.ones((2, 3)))

    def test_range_maps_respect_domain(self, rng):
        y = rng.normal(0.0, 5.0, size=100)
        assert np.all(Estimator.affine(2.0, 0.0, RANGE_POSITIVE)(y) > 0)
        out = Estimator.affine(2.0, 0.0, RANGE_UNIT)(y)
        assert np.all((out > 0) & (out < 1))

    def test_convolution_is_periodic(self):
        y = np.zeros((5, 5))
        y[0, 0] = 1.0
        kernel = np.zeros((3, 3))
        kernel[1, 0] = 1.0
        out = Estimator.convolution(kernel)(y)
        assert out.sum() == pytest.approx(1.0)
        assert out[0, 1] == 1.0 or out[0, 4] == 1.0

    def test_convolution_is_not_pixelwise(self):
        conv = Estimator.convolution(np.ones((3, 3)) / 9)
        assert not conv.is_pixelwise
        with pytest.raises(ConfigError):
            conv.pixel_function(0)

    def test_linear_form_reproduces_output(self, rng):
        conv = _estimators()[-1]
        y = rng.standard_normal((4, 4))
        W, b = conv.linear_form((4, 4))
        np.testing.assert_allclose(W @ y.ravel() + b, conv(y).ravel(), atol=1e-12)

    def test_nonlinear_has_no_linear_form(self):
        with pytest.raises(ConfigError):
            Estimator.affine(1.0, 0.0, RANGE_POSITIVE).linear_form((2, 2))

    def test_batch_axes(self, rng):
        f = _estimators()[1]
        batch = rng.standard_normal((3, 4, 4))
        np.testing.assert_allclose(f(batch)[2], f(batch[2]))


class TestDerivatives:

    @pytest.mark.parametrize('f', _estimators(), ids=lambda f: f"{f.kind}-{f.range_map}")
    def test_diag_jacobian(self, rng, f):
        y = rng.uniform(0.2, 0.8, size=(4, 4))
        diag = f.diag_jacobian(y)
        for i in (0, 5, 15):
            assert diag.ravel()[i] == pytest.approx(fd_derivative(f, y, i, 1, 1e-5), abs=1e-7)

    @pytest.mark.parametrize('f', _estimators(), ids=lambda f: f"{f.kind}-{f.range_map}")
    def test_grad_params(self, rng, f):
        u = rng.uniform(0.2, 0.8, size=(2, 4, 4))
        upstream = rng.standard_normal(u.shape)
        theta = f.param_vector()
        grad = f.grad_params(u, upstream)
        h = 1e-6
        for k in range(theta.size):
            bump = np.zeros_like(theta)
            bump[k] = h
            numeric = (np.sum(upstream * f.with_params(theta + bump)(u))
                       - np.sum(upstream * f.with_params(theta - bump)(u))) / (2 * h)
            assert grad[k] == pytest.approx(numeric, rel=1e-5, abs=1e-8)

    def test_central_difference_orders(self):
        h = 0.01
        values = central_difference(lambda m: np.exp(1.0 + m * h), 3, h)
        assert values == pytest.approx(np.e, rel=1e-3)
        with pytest.raises(ConfigError):
            central_difference(lambda m: 0.0, 5, h)

    def test_fd_step_underflow(self):
        with pytest.raises(ConfigError):
            fd_derivative(Estimator.identity(), np.array([1e20]), 0, 1, 1e-5)


class TestSerialization:

    def test_convolution_json(self):
        conv = _estimators()[-1]
        restored = Estimator.from_json(conv.to_json())
        assert restored.kind == conv.kind
        assert np.array_equal(restored.params['kernel'], conv.params['kernel'])

    def test_scalar_affine_json_keeps_shapes(self):
        restored = Estimator.from_json(Estimator.affine(0.25, -0.5, RANGE_UNIT).to_json())
        assert restored.params['a'].shape == ()
        assert restored.range_map == RANGE_UNIT


class TestTraining:

    def test_zero_epochs_keeps_parameters(self, rng):
        f = Estimator.affine(0.3, 0.2)
        data = TrainingData(rng.standard_normal((8, 4)), rng.standard_normal((8, 4)))
        cfg = TrainConfig(step_size=0.1, epochs=0, batch_size=4)
        trained = train(f, make_loss_builder('supervised', NoiseModel.gaussian(0.1)), data, cfg)
        assert np.array_equal(trained.param_vector(), f.param_vector())

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            TrainingData(np.zeros((4, 3)), np.zeros((4, 2)))

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(step_size=0.0, epochs=1, batch_size=1)
        with pytest.raises(ConfigError):
            TrainConfig(step_size=0.1, epochs=1, batch_size=1, gradient_mode='adam')

    def test_divergence_is_reported(self, rng):
        data = TrainingData(rng.uniform(1, 2, size=(16, 4)), rng.uniform(1, 2, size=(16, 4)))
        cfg = TrainConfig(step_size=50.0, epochs=500, batch_size=16)
        with np.errstate(all='ignore'):
            with pytest.raises(DivergenceError) as info:
                train(Estimator.affine(1.0, 0.0), make_loss_builder('supervised', NoiseModel.gaussian(0.1)),
                      data, cfg)
        assert np.all(np.isfinite(info.value.last_state.param_vector()))

    def test_training_is_deterministic(self, rng):
        model = NoiseModel.gaussian(0.1)
        x = rng.uniform(0.2, 0.8, size=(32, 4))
        y = x + 0.1 * rng.standard_normal(x.shape)
        cfg = TrainConfig(step_size=0.5, epochs=20, batch_size=8, seed=4)
        runs = [train(Estimator.affine(1.0, 0.0), make_loss_builder('gr2r_mse', model, 0.5),
                      TrainingData(y, x), cfg) for _ in range(2)]
        assert np.array_equal(runs[0].param_vector(), runs[1].param_vector())

    def test_finite_difference_mode_matches_analytic(self, rng):
        model = NoiseModel.gaussian(0.1)
        x = rng.uniform(0.2, 0.8, size=(32, 4))
        y = x + 0.1 * rng.standard_normal(x.shape)
        builder = make_loss_builder('supervised', model)
        analytic = train(Estimator.affine(1.0, 0.0), builder, TrainingData(y, x),
                         TrainConfig(step_size=0.5, epochs=10, batch_size=32))
        numeric = train(Estimator.affine(1.0, 0.0), builder, TrainingData(y, x),
                        TrainConfig(step_size=0.5, epochs=10, batch_size=32, gradient_mode='finite-difference'))
        np.testing.assert_allclose(analytic.param_vector(), numeric.param_vector(), rtol=1e-6)

    @pytest.mark.parametrize('loss, expected', [
        ('gr2r_mse', 0.04 / (0.04 + 0.01 / 0.5)),
        ('supervised', 0.04 / (0.04 + 0.01)),
    ])
    def test_trained_gain_matches_closed_form(self, loss, expected):
        rng = np.random.default_rng(7)
        n, sigma = 50000, 0.1
        x = rng.normal(0.5, 0.2, size=(n, 1))
        y = x + sigma * rng.standard_normal(x.shape)
        builder = make_loss_builder(loss, NoiseModel.gaussian(sigma), 0.5)
        cfg = TrainConfig(step_size=0.5, epochs=400, batch_size=n, seed=1)
        f = train(Estimator.affine(np.ones(1), np.zeros(1)), builder, TrainingData(y, x), cfg)
        assert float(f.params['a'][0]) == pytest.approx(expected, rel=0.02)
