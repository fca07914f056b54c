"""
Loss functionals for denoiser training and their exact or sampled expectations.

Conventions: every loss sums over pixels. Self-supervised losses drop terms
that do not depend on the estimator; LossValue.constant_convention names what
was dropped so values from different losses are never compared blindly.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import gammaln

from gr2r.estimators import Estimator, central_difference, fd_derivative
from gr2r.exceptions import ConfigError, DomainError, ShapeError, UnsupportedFamilyError
from gr2r.inverse_ops import OP_DENSE, ForwardOperator, TransformGroup, split_observed
from gr2r.nef_models import (
    GAMMA, GAUSSIAN, POISSON,
    ArrayLike, NoiseModel,
    as_image, check_mean_domain, check_observation, poisson_counts, sample_noisy,
)
from gr2r.oracles import (
    CI_STANDARD_ERRORS, enumerate_split_given, enumerate_split_law, expected_functional,
)
from gr2r.settings import setting
from gr2r.splitters import SplitPair, split, split_moments

logger = logging.getLogger(__name__)

EXACT = 'exact'
DROPS_CONSTANTS = 'drops-f-independent-terms'
DROPS_CONSTANTS_AND_SCALE = 'drops-f-independent-terms-and-positive-scale'

SUP_MSE = 'sup_mse'
SUP_NLL = 'sup_nll'
GR2R_MSE = 'gr2r_mse'
GR2R_NLL = 'gr2r_nll'
EXPECTED_LOSSES = (SUP_MSE, SUP_NLL, GR2R_MSE, GR2R_NLL)

DIV_EXACT = 'exact-diagonal'
DIV_MONTE_CARLO = 'monte-carlo'

TABLE_COEFFICIENTS = 'table'
BETA_MOMENT_COEFFICIENTS = 'beta-moments'

# Fixed substream count for Monte-Carlo expectations; independent of --jobs.
MC_CHUNKS = 8


@dataclass
class LossValue:
    value: float
    n_splits_used: int = 0
    constant_convention: str = EXACT

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value):
            raise DomainError(f"Loss value is not finite: {self.value}")

    def __float__(self):
        return self.value


@dataclass
class ExpectedLoss:
    value: float
    half_width: float
    method: str


def _same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _squared_error(f: Estimator, y_in: ArrayLike, target: ArrayLike, what: str) -> float:
    out = as_image(f(as_image(y_in)))
    target = as_image(target)
    _same_shape(out, target, what)
    return float(np.sum((out - target) ** 2))


def sup_mse(f: Estimator, y_in: ArrayLike, x: ArrayLike) -> LossValue:
    return LossValue(_squared_error(f, y_in, x, 'sup_mse'))


def n2n_loss(f: Estimator, y1: ArrayLike, y2: ArrayLike) -> LossValue:
    return LossValue(_squared_error(f, y1, y2, 'n2n_loss'), n_splits_used=1,
                     constant_convention=DROPS_CONSTANTS)


def gr2r_mse(f: Estimator, pair: SplitPair) -> LossValue:
    return LossValue(_squared_error(f, pair.y1, pair.y2, 'gr2r_mse'), n_splits_used=1,
                     constant_convention=DROPS_CONSTANTS)


# -- likelihood losses ------------------------------------------------------

def nll_terms(model: NoiseModel, target: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Elementwise NLL of `target` under mean `v` and its derivative in v.

        gaussian   (v - t)^2
        poisson    v - t log v
        gamma      log v + t / v
        binomial   -t log v - (1 - t) log(1 - v)
    """
    if model.family == GAUSSIAN:
        return (v - target) ** 2, 2.0 * (v - target)
    check_mean_domain(model, v, interior=True)
    if model.family == POISSON:
        return v - target * np.log(v), 1.0 - target / v
    if model.family == GAMMA:
        return np.log(v) + target / v, 1.0 / v - target / v ** 2
    return (-target * np.log(v) - (1.0 - target) * np.log1p(-v),
            -target / v + (1.0 - target) / (1.0 - v))


def _nll(model: NoiseModel, f: Estimator, y_in: ArrayLike, target: ArrayLike, what: str) -> float:
    out = as_image(f(as_image(y_in)))
    target = as_image(target)
    _same_shape(out, target, what)
    try:
        values, _ = nll_terms(model, target, out)
    except DomainError as e:
        raise DomainError(f"{what}: estimator output at the {model.family} domain boundary",
                          e.index) from e
    return float(np.sum(values))


def gr2r_nll(model: NoiseModel, f: Estimator, pair: SplitPair) -> LossValue:
    convention = DROPS_CONSTANTS if model.family == GAUSSIAN else DROPS_CONSTANTS_AND_SCALE
    return LossValue(_nll(model, f, pair.y1, pair.y2, 'gr2r_nll'), n_splits_used=1,
                     constant_convention=convention)


def sup_nll(model: NoiseModel, f: Estimator, y_in: ArrayLike, x: ArrayLike) -> LossValue:
    """NLL of the clean x under the family density with mean f(y_in)."""
    return LossValue(_nll(model, f, y_in, x, 'sup_nll'),
                     constant_convention=DROPS_CONSTANTS_AND_SCALE)


# -- Stein-type limits ------------------------------------------------------

def sure_gaussian(f: Estimator, y: ArrayLike, sigma: float, div_mode: str = DIV_EXACT,
                  rng: Optional[np.random.Generator] = None, probes: Optional[int] = None,
                  eps: Optional[float] = None) -> LossValue:
    """||f(y) - y||^2 + 2 sigma^2 div f(y)."""
    y = as_image(y)
    out = as_image(f(y))
    _same_shape(out, y, 'sure_gaussian')
    residual = float(np.sum((out - y) ** 2))

    if div_mode == DIV_EXACT:
        if not hasattr(f, 'diag_jacobian'):
            raise ConfigError("Exact divergence needs an estimator with diag_jacobian")
        div = float(np.sum(f.diag_jacobian(y)))
    elif div_mode == DIV_MONTE_CARLO:
        probes = int(setting('sure', 'mc_div_probes', 1)) if probes is None else int(probes)
        if probes < 1:
            raise ConfigError(f"Monte-Carlo divergence needs at least one probe, got {probes}")
        if rng is None:
            raise ConfigError("Monte-Carlo divergence needs an rng")
        if eps is None:
            eps = float(setting('sure', 'mc_div_rel_eps', 1e-3)) * (1.0 + float(np.max(np.abs(y))))
        estimates = []
        for _ in range(probes):
            b = 2.0 * rng.integers(0, 2, size=y.shape) - 1.0
            estimates.append(float(np.sum(b * (as_image(f(y + eps * b)) - out))) / eps)
        div = float(np.mean(estimates))
    else:
        raise ConfigError(f"Unknown divergence mode '{div_mode}'")
    return LossValue(residual + 2.0 * sigma ** 2 * div, constant_convention=DROPS_CONSTANTS)


def _diagonal_shifted(f: Estimator, y: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """f_i(y + shift_i e_i) for every i."""
    if getattr(f, 'is_pixelwise', False):
        return as_image(f(y + shift))
    values = np.empty(y.size)
    for i in range(y.size):
        moved = y.ravel().copy()
        moved[i] += shift.ravel()[i]
        values[i] = np.ravel(f(moved.reshape(y.shape)))[i]
    return values.reshape(y.shape)


def pure_limit_poisson(f: Estimator, y: ArrayLike, gamma: float) -> LossValue:
    """||f(y) - y||^2 + 2 sum_i y_i (f_i(y) - f_i(y - gamma e_i))."""
    y = as_image(y)
    poisson_counts(y, gamma)
    out = as_image(f(y))
    _same_shape(out, y, 'pure_limit_poisson')
    shifted = _diagonal_shifted(f, y, np.full(y.shape, -float(gamma)))
    value = float(np.sum((out - y) ** 2)) + 2.0 * float(np.sum(y * (out - shifted)))
    return LossValue(value, constant_convention=DROPS_CONSTANTS)


def gamma_series_coefficient(looks: int, k: int) -> float:
    """b(l, k) = l (k - 1) / (k (l + k - 1))."""
    return looks * (k - 1) / (k * (looks + k - 1))


def _diagonal_derivative(f: Estimator, y: np.ndarray, order: int, h: np.ndarray) -> np.ndarray:
    if getattr(f, 'is_pixelwise', False):
        return central_difference(lambda m: as_image(f(y + m * h)), order, h)
    return np.array([fd_derivative(f, y, i, order, float(h.ravel()[i]))
                     for i in range(y.size)]).reshape(y.shape)


def sure_gamma_series(f: Estimator, y: ArrayLike, looks: int, K: Optional[int] = None,
                      fd_step: Optional[float] = None,
                      coefficients: str = TABLE_COEFFICIENTS) -> LossValue:
    """
    Truncated small-alpha limit of the Gamma GR2R-MSE.

    The table coefficients start at k = 2, so they leave out the first-order
    term y^2 / (l + 1) f' of the limit. The beta-moment coefficients
    y^(k+1) Gamma(l+1) / Gamma(l+k+1), with alternating sign, start at k = 1
    and give the limit itself.
    Derivatives use central differences with step max(fd_min_step, fd_rel_step * y_i)
    unless fd_step fixes it.
    """
    y = as_image(y)
    K = int(setting('sure', 'gamma_series_terms', 4)) if K is None else int(K)
    if coefficients == TABLE_COEFFICIENTS:
        first = 2
    elif coefficients == BETA_MOMENT_COEFFICIENTS:
        first = 1
    else:
        raise ConfigError(f"Unknown coefficient set '{coefficients}'")
    if K < first or K > 4:
        raise ConfigError(f"Gamma series needs {first} <= K <= 4, got {K}")
    bad = ~(y > 0)
    if np.any(bad):
        raise DomainError("Gamma SURE needs y > 0", int(np.flatnonzero(bad.ravel())[0]))

    if fd_step is None:
        h = np.maximum(float(setting('sure', 'fd_min_step', 1e-4)),
                       float(setting('sure', 'fd_rel_step', 1e-3)) * y)
    else:
        h = np.full(y.shape, float(fd_step))
    if np.any(y + h == y):
        raise ConfigError("Finite-difference step underflows")

    out = as_image(f(y))
    _same_shape(out, y, 'sure_gamma_series')
    correction = np.zeros_like(y)
    for k in range(first, K + 1):
        derivative = _diagonal_derivative(f, y, k, h)
        if coefficients == TABLE_COEFFICIENTS:
            weight = gamma_series_coefficient(looks, k) * np.exp(gammaln(looks) - gammaln(looks + k))
            correction += weight * (-y) ** (k + 1) * derivative
        else:
            weight = np.exp(gammaln(looks + 1) - gammaln(looks + k + 1))
            correction += (-1.0) ** (k + 1) * weight * y ** (k + 1) * derivative
    value = float(np.sum((out - y) ** 2)) + 2.0 * float(np.sum(correction))
    return LossValue(value, constant_convention=DROPS_CONSTANTS)


# -- expectations -------------------------------------------------------------

def _grid_functional(model: NoiseModel, loss: str, fi: Callable, target_x: Optional[float]):
    def functional(atoms: pd.DataFrame) -> np.ndarray:
        v = fi(atoms['y1'].to_numpy())
        target = atoms['y2'].to_numpy() if loss in (GR2R_MSE, GR2R_NLL) else np.full(len(atoms), target_x)
        if loss in (GR2R_MSE, SUP_MSE):
            return (v - target) ** 2
        live = atoms['probability'].to_numpy() > 0
        values = np.full(len(atoms), np.nan)
        values[live], _ = nll_terms(model, target[live], v[live])
        return values
    return functional


def _expected_by_enumeration(model, f, loss, alpha, x, y, tail_eps) -> float:
    if not model.is_discrete:
        raise UnsupportedFamilyError(
            f"Enumeration needs a discrete family, got {model.family}; use monte-carlo")
    if not getattr(f, 'is_pixelwise', False):
        raise ConfigError("Enumeration needs a pixelwise estimator")
    given = as_image(y) if y is not None else as_image(x)
    x_flat = None if x is None else np.broadcast_to(as_image(x), given.shape).ravel()
    total = 0.0
    cache = {}
    for i, value in enumerate(given.ravel()):
        key = float(value)
        if key not in cache:
            cache[key] = (enumerate_split_given(model, key, alpha) if y is not None
                          else enumerate_split_law(model, key, alpha, tail_eps))
        target_x = None if x_flat is None else float(x_flat[i])
        functional = _grid_functional(model, loss, f.pixel_function(i), target_x)
        total += expected_functional(cache[key], functional)
    return total


def _expected_by_moments(model, f, loss, alpha, x, y) -> float:
    if loss not in (SUP_MSE, GR2R_MSE):
        raise ConfigError(f"The moments method covers squared-error losses only, got '{loss}'")
    if not getattr(f, 'is_linear', False):
        raise ConfigError("The moments method needs an estimator linear in its input")
    if y is not None:
        moments = split_moments(model, alpha, y=y)
    else:
        moments = split_moments(model, alpha, x=x)
    shape = moments.mean1.shape
    W, b = f.linear_form(shape)
    m1 = moments.mean1.ravel()
    mean_out = W @ m1 + b
    spread = float(np.sum(W ** 2 * moments.var1.ravel()[None, :]))
    if loss == SUP_MSE:
        return float(np.sum((mean_out - as_image(x).ravel()) ** 2)) + spread
    cross = float(np.sum(np.diag(W) * moments.cov12.ravel()))
    bias = float(np.sum((mean_out - moments.mean2.ravel()) ** 2))
    return bias + spread - 2.0 * cross + float(np.sum(moments.var2))


def _chunk_losses(model, f, loss, alpha, x, y, count, rng) -> np.ndarray:
    given = as_image(y) if y is not None else as_image(x)
    batch = np.broadcast_to(given, (count,) + given.shape).copy()
    if y is None:
        batch = sample_noisy(model, batch, rng)
    pair = split(model, batch, alpha, rng)
    out = as_image(f(pair.y1))
    if loss in (GR2R_MSE, GR2R_NLL):
        target = pair.y2
    else:
        target = np.broadcast_to(as_image(x), out.shape)
    if loss in (GR2R_MSE, SUP_MSE):
        values = (out - target) ** 2
    else:
        values, _ = nll_terms(model, target, out)
    return values.reshape(count, -1).sum(axis=1)


def _expected_by_monte_carlo(model, f, loss, alpha, x, y, N, seed, jobs) -> Tuple[float, float]:
    if N is None or N < 100:
        raise ConfigError(f"Monte-Carlo expectation needs N >= 100, got {N}")
    streams = np.random.default_rng(seed).spawn(MC_CHUNKS)
    sizes = [N // MC_CHUNKS + (1 if k < N % MC_CHUNKS else 0) for k in range(MC_CHUNKS)]

    def run(k):
        return _chunk_losses(model, f, loss, alpha, x, y, sizes[k], streams[k])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(run, range(MC_CHUNKS)))
    else:
        chunks = [run(k) for k in range(MC_CHUNKS)]
    values = np.concatenate(chunks)
    half_width = CI_STANDARD_ERRORS * float(np.std(values, ddof=1)) / np.sqrt(values.size)
    return float(np.mean(values)), half_width


def expected_loss(model: NoiseModel, f: Estimator, which_loss: str, alpha: float,
                  x: Optional[ArrayLike] = None, y: Optional[ArrayLike] = None,
                  method: str = 'enumerate', tail_eps: Optional[float] = None,
                  N: Optional[int] = None, seed: int = 0, jobs: int = 1) -> ExpectedLoss:
    """
    Expectation of a loss over the split law.

    Conditioning is on y when y is given (x, if also given, is the supervised
    target) and on x otherwise. Methods: 'enumerate' (discrete families,
    pixelwise estimators), 'moments' (squared-error losses, linear estimators)
    and 'monte-carlo' (N draws, 4-standard-error half width).
    """
    if which_loss not in EXPECTED_LOSSES:
        raise ConfigError(f"Unknown loss '{which_loss}'")
    if x is None and y is None:
        raise ConfigError("expected_loss needs x or y")
    if which_loss in (SUP_MSE, SUP_NLL) and x is None:
        raise ConfigError(f"{which_loss} needs the clean x as target")
    if y is not None:
        check_observation(model, y)

    if method == 'enumerate':
        value = _expected_by_enumeration(model, f, which_loss, alpha, x, y, tail_eps)
        return ExpectedLoss(value, 0.0, method)
    if method == 'moments':
        return ExpectedLoss(_expected_by_moments(model, f, which_loss, alpha, x, y), 0.0, method)
    if method == 'monte-carlo':
        value, half_width = _expected_by_monte_carlo(model, f, which_loss, alpha, x, y, N, seed, jobs)
        return ExpectedLoss(value, half_width, method)
    raise ConfigError(f"Unknown expectation method '{method}'")


# -- inverse problems ---------------------------------------------------------

def back_project(A: ForwardOperator, y: ArrayLike) -> np.ndarray:
    """Estimator input for a measurement: A^T y for dense operators, y itself otherwise."""
    y = as_image(y)
    return A.adjoint(y) if A.kind == OP_DENSE else y


def _ei_term(A: ForwardOperator, f: Estimator, moved: np.ndarray) -> float:
    out = as_image(f(back_project(A, A.apply(moved))))
    _same_shape(out, moved, 'ei_loss')
    return float(np.sum((out - moved) ** 2))


def gr2r_operator_mse(A: ForwardOperator, f: Estimator, pair: SplitPair) -> LossValue:
    """||A f(y1) - y2||^2 with y1 zero-filled on unobserved entries."""
    y1 = as_image(pair.y1)
    y2 = as_image(pair.y2)
    if y1.shape[y1.ndim - len(A.output_shape):] != A.output_shape:
        raise ShapeError(f"y1 shape {y1.shape} does not match operator output {A.output_shape}")
    estimate = A.apply(as_image(f(back_project(A, y1))))
    _same_shape(estimate, y2, 'gr2r_operator_mse')
    return LossValue(float(np.sum((estimate - y2) ** 2)), n_splits_used=1,
                     constant_convention=DROPS_CONSTANTS)


def ei_loss(A: ForwardOperator, f: Estimator, x_hat: ArrayLike, transforms: TransformGroup,
            rng: Optional[np.random.Generator] = None, n_samples: int = 1) -> LossValue:
    """
    Mean of ||f(A T_g x_hat) - T_g x_hat||^2 over sampled g, or over the whole
    group when rng is None. Dense measurements are back-projected with A^T
    before f sees them.
    """
    if transforms is None or len(transforms) == 0:
        raise ConfigError("ei_loss needs a nonempty transform group")
    x_hat = as_image(x_hat)
    if rng is None:
        chosen = list(transforms.elements)
    else:
        chosen = [transforms.sample(rng) for _ in range(max(1, n_samples))]
    values = []
    for g in chosen:
        values.append(_ei_term(A, f, g.apply(x_hat)))
    return LossValue(float(np.mean(values)), constant_convention=EXACT)


# -- training objectives ------------------------------------------------------

@dataclass
class PairObjective:
    """Mean over batch and pixels of loss(A f(inputs), targets); squared error unless model is set."""
    inputs: np.ndarray
    targets: np.ndarray
    model: Optional[NoiseModel] = None
    operator: Optional[ForwardOperator] = None

    def _count(self) -> int:
        return max(1, self.targets.size)

    def _estimator_inputs(self) -> np.ndarray:
        return back_project(self.operator, self.inputs) if self.operator is not None else self.inputs

    def _forward(self, f: Estimator) -> np.ndarray:
        out = as_image(f(self._estimator_inputs()))
        return self.operator.apply(out) if self.operator is not None else out

    def value(self, f: Estimator) -> float:
        out = self._forward(f)
        if self.model is None:
            return float(np.sum((out - self.targets) ** 2)) / self._count()
        values, _ = nll_terms(self.model, self.targets, out)
        return float(np.sum(values)) / self._count()

    def upstream(self, f: Estimator) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        out = self._forward(f)
        if self.model is None:
            grad = 2.0 * (out - self.targets)
        else:
            _, grad = nll_terms(self.model, self.targets, out)
        if self.operator is not None:
            grad = self.operator.adjoint(grad)
        return self._estimator_inputs(), grad / self._count()


@dataclass
class SumObjective:
    """Weighted sum of objectives; gradients fall back to finite differences."""
    parts: List
    weights: List[float]

    def value(self, f: Estimator) -> float:
        return float(sum(w * p.value(f) for p, w in zip(self.parts, self.weights)))

    def upstream(self, f: Estimator):
        return None


@dataclass
class SureObjective:
    y: np.ndarray
    sigma: float

    def value(self, f: Estimator) -> float:
        return sum(sure_gaussian(f, yb, self.sigma).value for yb in self.y) / self.y.size

    def upstream(self, f: Estimator):
        return None


@dataclass
class EIObjective:
    A: ForwardOperator
    x_hat_inputs: np.ndarray
    transforms: TransformGroup
    transform_draws: List

    def value(self, f: Estimator) -> float:
        total = 0.0
        for u, g in zip(self.x_hat_inputs, self.transform_draws):
            total += _ei_term(self.A, f, g.apply(as_image(f(back_project(self.A, u)))))
        return total / self.x_hat_inputs.size

    def upstream(self, f: Estimator):
        return None


TRAINING_LOSSES = ('supervised', 'supervised_nll', 'gr2r_mse', 'gr2r_nll', 'sure',
                   'gr2r_operator_mse')


def make_loss_builder(loss_name: str, model: NoiseModel, alpha: Optional[float] = None,
                      operator: Optional[ForwardOperator] = None,
                      transforms: Optional[TransformGroup] = None, ei_weight: float = 0.0):
    """
    Return a builder (y_batch, x_batch, rng) -> objective for estimators.train.

    Self-supervised builders draw a fresh split for every batch.
    """
    if loss_name not in TRAINING_LOSSES:
        raise ConfigError(f"Unknown training loss '{loss_name}'")
    if loss_name in ('gr2r_mse', 'gr2r_nll', 'gr2r_operator_mse') and alpha is None:
        raise ConfigError(f"{loss_name} needs alpha")
    if loss_name == 'sure' and model.family != GAUSSIAN:
        raise UnsupportedFamilyError("SURE training is implemented for Gaussian noise only")

    def build(y_batch, x_batch, rng):
        if loss_name in ('supervised', 'supervised_nll'):
            if x_batch is None:
                raise ConfigError("Supervised training needs clean images")
            nll_model = model if loss_name == 'supervised_nll' else None
            return PairObjective(y_batch, x_batch, model=nll_model)
        if loss_name == 'sure':
            return SureObjective(y_batch, model.sigma)
        if loss_name == 'gr2r_operator_mse':
            A = operator if operator is not None else ForwardOperator.identity(y_batch.shape[1:])
            pair = split_observed(model, A, y_batch, alpha, rng)
            main = PairObjective(pair.y1, pair.y2, operator=A)
            if ei_weight > 0 and transforms is not None:
                draws = [transforms.sample(rng) for _ in range(len(y_batch))]
                return SumObjective([main, EIObjective(A, pair.y1, transforms, draws)],
                                    [1.0, ei_weight])
            return main
        pair = split(model, y_batch, alpha, rng)
        return PairObjective(pair.y1, pair.y2, model=model if loss_name == 'gr2r_nll' else None)

    return build
