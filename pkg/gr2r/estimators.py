"""
Small analytic denoisers f: R^n -> R^n, their derivatives, and a plain
gradient-descent trainer.

Kinds: identity, constant, affine (per pixel), polynomial (shared
coefficients, degree <= 4) and periodic linear convolution. An optional
range map squashes the output into (0, inf) or (0, 1) for likelihood losses.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import expit

from gr2r.exceptions import ConfigError, DivergenceError, ShapeError
from gr2r.nef_models import ArrayLike, ImageTensor, as_image
from gr2r.settings import setting

logger = logging.getLogger(__name__)

IDENTITY = 'identity'
CONSTANT = 'constant'
AFFINE = 'affine'
POLYNOMIAL = 'polynomial'
CONVOLUTION = 'convolution'
KINDS = (IDENTITY, CONSTANT, AFFINE, POLYNOMIAL, CONVOLUTION)

RANGE_NONE = 'none'
RANGE_POSITIVE = 'positive'
RANGE_UNIT = 'unit-interval'
RANGE_MAPS = (RANGE_NONE, RANGE_POSITIVE, RANGE_UNIT)

PARAM_NAMES = {
    IDENTITY: (),
    CONSTANT: ('c',),
    AFFINE: ('a', 'b'),
    POLYNOMIAL: ('coeffs',),
    CONVOLUTION: ('kernel',),
}

MAX_POLY_DEGREE = 4


def range_margin() -> float:
    return float(setting('estimators', 'range_margin', 1e-6))


def _reduce_to(arr: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to a parameter's shape."""
    if shape == ():
        return np.asarray(np.sum(arr))
    extra = arr.ndim - len(shape)
    if extra > 0:
        arr = arr.sum(axis=tuple(range(extra)))
    return arr.reshape(shape)


@dataclass
class Estimator:
    kind: str
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    range_map: str = RANGE_NONE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"Unknown estimator kind '{self.kind}'")
        if self.range_map not in RANGE_MAPS:
            raise ConfigError(f"Unknown range map '{self.range_map}'")
        missing = set(PARAM_NAMES[self.kind]) - set(self.params)
        if missing:
            raise ConfigError(f"{self.kind} estimator is missing parameters {sorted(missing)}")
        self.params = {k: np.array(v, dtype=np.float64) for k, v in self.params.items()}
        if self.kind == POLYNOMIAL:
            coeffs = self.params['coeffs']
            if coeffs.ndim != 1 or not 1 <= coeffs.size <= MAX_POLY_DEGREE + 1:
                raise ConfigError(f"polynomial degree must be <= {MAX_POLY_DEGREE}")
        if self.kind == CONVOLUTION:
            kernel = self.params['kernel']
            if any(s % 2 == 0 for s in kernel.shape):
                raise ConfigError(f"convolution kernel sizes must be odd, got {kernel.shape}")

    # -- constructors ---------------------------------------------------

    @classmethod
    def identity(cls, range_map: str = RANGE_NONE) -> 'Estimator':
        return cls(IDENTITY, {}, range_map)

    @classmethod
    def constant(cls, c: ArrayLike, range_map: str = RANGE_NONE) -> 'Estimator':
        return cls(CONSTANT, {'c': c}, range_map)

    @classmethod
    def affine(cls, a: ArrayLike = 1.0, b: ArrayLike = 0.0, range_map: str = RANGE_NONE) -> 'Estimator':
        return cls(AFFINE, {'a': a, 'b': b}, range_map)

    @classmethod
    def polynomial(cls, coeffs: ArrayLike, range_map: str = RANGE_NONE) -> 'Estimator':
        return cls(POLYNOMIAL, {'coeffs': coeffs}, range_map)

    @classmethod
    def convolution(cls, kernel: ArrayLike, range_map: str = RANGE_NONE) -> 'Estimator':
        return cls(CONVOLUTION, {'kernel': kernel}, range_map)

    # -- properties -----------------------------------------------------

    @property
    def is_pixelwise(self) -> bool:
        """Output pixel i depends on input pixel i only."""
        return self.kind != CONVOLUTION

    @property
    def is_linear(self) -> bool:
        """f(y) = W y + b exactly."""
        return self.range_map == RANGE_NONE and self.kind in (IDENTITY, CONSTANT, AFFINE, CONVOLUTION)

    # -- evaluation -----------------------------------------------------

    def _kernel_for(self, u: np.ndarray) -> np.ndarray:
        kernel = self.params['kernel']
        if kernel.ndim > u.ndim:
            raise ShapeError(f"Kernel of rank {kernel.ndim} cannot filter input of rank {u.ndim}")
        return kernel.reshape((1,) * (u.ndim - kernel.ndim) + kernel.shape)

    def pre_map(self, u: ArrayLike) -> np.ndarray:
        """Output before the range map; leading axes of `u` are treated as a batch."""
        u = as_image(u)
        if self.kind == IDENTITY:
            return u.copy()
        if self.kind == CONSTANT:
            return np.broadcast_to(self.params['c'], u.shape).astype(np.float64)
        if self.kind == AFFINE:
            try:
                return self.params['a'] * u + self.params['b'] + np.zeros_like(u)
            except ValueError as e:
                raise ShapeError(f"Affine parameters do not match input shape {u.shape}") from e
        if self.kind == POLYNOMIAL:
            return np.polynomial.polynomial.polyval(u, self.params['coeffs'])
        return ndimage.convolve(u, self._kernel_for(u), mode='wrap')

    def _range(self, pre: np.ndarray) -> np.ndarray:
        if self.range_map == RANGE_NONE:
            return pre
        margin = range_margin()
        if self.range_map == RANGE_POSITIVE:
            return np.maximum(np.logaddexp(0.0, pre), margin)
        return np.clip(expit(pre), margin, 1.0 - margin)

    def _range_derivative(self, pre: np.ndarray) -> np.ndarray:
        if self.range_map == RANGE_NONE:
            return np.ones_like(pre)
        margin = range_margin()
        s = expit(pre)
        if self.range_map == RANGE_POSITIVE:
            return np.where(np.logaddexp(0.0, pre) > margin, s, 0.0)
        inside = (s > margin) & (s < 1.0 - margin)
        return np.where(inside, s * (1.0 - s), 0.0)

    def apply(self, y: ArrayLike) -> ImageTensor:
        return self._range(self.pre_map(y))

    def __call__(self, y: ArrayLike) -> ImageTensor:
        return self.apply(y)

    def diag_jacobian(self, y: ArrayLike) -> ImageTensor:
        """Elementwise d f_i / d y_i, including the range-map factor."""
        y = as_image(y)
        pre = self.pre_map(y)
        if self.kind == IDENTITY:
            d = np.ones_like(y)
        elif self.kind == CONSTANT:
            d = np.zeros_like(y)
        elif self.kind == AFFINE:
            d = np.broadcast_to(self.params['a'], y.shape).astype(np.float64)
        elif self.kind == POLYNOMIAL:
            d = np.polynomial.polynomial.polyval(y, np.polynomial.polynomial.polyder(self.params['coeffs']))
        else:
            kernel = self.params['kernel']
            d = np.full_like(y, kernel[tuple(s // 2 for s in kernel.shape)])
        return d * self._range_derivative(pre)

    def pixel_function(self, i: int) -> Callable[[np.ndarray], np.ndarray]:
        """Scalar map v -> f_i(v) of a pixelwise estimator at flat index i."""
        if not self.is_pixelwise:
            raise ConfigError(f"{self.kind} estimator is not pixelwise")

        def pick(name):
            value = self.params[name]
            return value if value.ndim == 0 else value.ravel()[i]

        def fn(v):
            v = as_image(v)
            if self.kind == IDENTITY:
                pre = v.copy()
            elif self.kind == CONSTANT:
                pre = np.full_like(v, pick('c'))
            elif self.kind == AFFINE:
                pre = pick('a') * v + pick('b')
            else:
                pre = np.polynomial.polynomial.polyval(v, self.params['coeffs'])
            return self._range(pre)

        return fn

    def linear_form(self, shape: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
        """Dense (W, b) with f(y).ravel() = W @ y.ravel() + b."""
        if not self.is_linear:
            raise ConfigError(f"{self.kind} estimator with range map '{self.range_map}' is not linear")
        n = int(np.prod(shape))
        bias = self.pre_map(np.zeros(shape)).ravel()
        basis = np.eye(n).reshape((n,) + tuple(shape))
        responses = self.pre_map(basis).reshape(n, n) - bias
        return responses.T, bias

    # -- parameters -----------------------------------------------------

    def param_vector(self) -> np.ndarray:
        names = PARAM_NAMES[self.kind]
        if not names:
            return np.zeros(0)
        return np.concatenate([self.params[k].ravel() for k in names])

    def with_params(self, vector: np.ndarray) -> 'Estimator':
        params, offset = {}, 0
        for name in PARAM_NAMES[self.kind]:
            shape = self.params[name].shape
            size = int(np.prod(shape))
            params[name] = np.asarray(vector[offset:offset + size]).reshape(shape)
            offset += size
        return Estimator(self.kind, params, self.range_map)

    def grad_params(self, u: ArrayLike, upstream: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product: d/dtheta of sum(upstream * f(u))."""
        u = as_image(u)
        g = upstream * self._range_derivative(self.pre_map(u))
        if self.kind == IDENTITY:
            return np.zeros(0)
        if self.kind == CONSTANT:
            return _reduce_to(g, self.params['c'].shape).ravel()
        if self.kind == AFFINE:
            ga = _reduce_to(g * u, self.params['a'].shape).ravel()
            gb = _reduce_to(g, self.params['b'].shape).ravel()
            return np.concatenate([ga, gb])
        if self.kind == POLYNOMIAL:
            powers = range(self.params['coeffs'].size)
            return np.array([np.sum(g * u ** k) for k in powers])
        kernel = self.params['kernel']
        axes = tuple(range(u.ndim - kernel.ndim, u.ndim))
        center = np.array([s // 2 for s in kernel.shape])
        grad = np.zeros(kernel.shape)
        for tap in np.ndindex(kernel.shape):
            shifted = np.roll(u, tuple(np.array(tap) - center), axis=axes)
            grad[tap] = np.sum(g * shifted)
        return grad.ravel()

    # -- serialization --------------------------------------------------

    def to_json(self) -> str:
        names = list(PARAM_NAMES[self.kind])
        doc = {
            'kind': self.kind,
            'range_map': self.range_map,
            'param_names': names,
            'param_shapes': [list(self.params[k].shape) for k in names],
            'params': [float(v) for v in self.param_vector()],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> 'Estimator':
        doc = json.loads(text)
        kind = doc['kind']
        params, offset = {}, 0
        flat = np.asarray(doc.get('params', []), dtype=np.float64)
        for name, shape in zip(doc.get('param_names', []), doc.get('param_shapes', [])):
            size = int(np.prod(shape)) if shape else 1
            params[name] = flat[offset:offset + size].reshape(shape)
            offset += size
        return cls(kind, params, doc.get('range_map', RANGE_NONE))


def central_difference(f_at: Callable[[int], np.ndarray], order: int, h):
    """
    Order-matched central stencil; f_at(m) evaluates the function at y + m*h.
    `h` may be an array of per-pixel steps.
    """
    if order == 1:
        return (f_at(1) - f_at(-1)) / (2 * h)
    if order == 2:
        return (f_at(1) - 2 * f_at(0) + f_at(-1)) / h ** 2
    if order == 3:
        return (f_at(2) - 2 * f_at(1) + 2 * f_at(-1) - f_at(-2)) / (2 * h ** 3)
    if order == 4:
        return (f_at(2) - 4 * f_at(1) + 6 * f_at(0) - 4 * f_at(-1) + f_at(-2)) / h ** 4
    raise ConfigError(f"Derivative order must be in 1..4, got {order}")


def fd_derivative(f: Callable[[ImageTensor], ImageTensor], y: ArrayLike, i: int,
                  order: int, h: float) -> float:
    """Central finite-difference estimate of d^k f_i / d y_i^k."""
    y = as_image(y)
    flat = y.ravel()
    if not 1 <= order <= 4:
        raise ConfigError(f"Derivative order must be in 1..4, got {order}")
    if not h > 0 or flat[i] + h == flat[i]:
        raise ConfigError(f"Finite-difference step {h} underflows at y_i={flat[i]}")

    def f_at(m):
        shifted = flat.copy()
        shifted[i] += m * h
        return float(np.ravel(f(shifted.reshape(y.shape)))[i])

    return float(central_difference(f_at, order, h))


# -- training -----------------------------------------------------------

ANALYTIC = 'analytic'
FINITE_DIFFERENCE = 'finite-difference'


@dataclass(frozen=True)
class TrainConfig:
    step_size: float
    epochs: int
    batch_size: int
    seed: int = 0
    gradient_mode: str = ANALYTIC
    fd_step: float = 1e-5

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.gradient_mode not in (ANALYTIC, FINITE_DIFFERENCE):
            raise ConfigError(f"Unknown gradient mode '{self.gradient_mode}'")


class Objective(Protocol):
    """A loss on one batch, as built by a loss builder."""

    def value(self, f: Estimator) -> float:
        ...

    def upstream(self, f: Estimator) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """(inputs, dL/d f(inputs)) when the loss supports analytic gradients."""
        ...


LossBuilder = Callable[[np.ndarray, Optional[np.ndarray], np.random.Generator], Objective]


@dataclass
class TrainingData:
    """Noisy observations y (first axis = sample) and optional clean x."""
    y: np.ndarray
    x: Optional[np.ndarray] = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x is not None:
            self.x = np.asarray(self.x, dtype=np.float64)
            if self.x.shape != self.y.shape:
                raise ShapeError(f"x shape {self.x.shape} does not match y shape {self.y.shape}")

    def __len__(self):
        return self.y.shape[0]


def objective_gradient(f: Estimator, objective: Objective, mode: str, fd_step: float) -> np.ndarray:
    if mode == ANALYTIC:
        up = objective.upstream(f)
        if up is not None:
            inputs, dl_df = up
            return f.grad_params(inputs, dl_df)
        logger.debug("Objective has no analytic gradient, falling back to finite differences")
    theta = f.param_vector()
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        bump = np.zeros_like(theta)
        bump[k] = fd_step
        grad[k] = (objective.value(f.with_params(theta + bump))
                   - objective.value(f.with_params(theta - bump))) / (2 * fd_step)
    return grad


def train(f: Estimator, loss_builder: LossBuilder, data: TrainingData, cfg: TrainConfig,
          history: Optional[List[float]] = None) -> Estimator:
    """
    Mini-batch gradient descent on f's parameters.

    Deterministic given cfg.seed. `history`, when given, receives the mean
    batch loss of every epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    theta = f.param_vector()
    current = f.with_params(theta)
    if cfg.epochs == 0 or theta.size == 0:
        return current

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            x_batch = data.x[idx] if data.x is not None else None
            objective = loss_builder(data.y[idx], x_batch, rng)
            value = objective.value(current)
            grad = objective_gradient(current, objective, cfg.gradient_mode, cfg.fd_step)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise DivergenceError(
                    f"Loss became non-finite at epoch {epoch + 1}", last_state=current)
            epoch_losses.append(value)
            candidate = current.with_params(current.param_vector() - cfg.step_size * grad)
            if not np.all(np.isfinite(candidate.param_vector())):
                raise DivergenceError(
                    f"Parameters became non-finite at epoch {epoch + 1}", last_state=current)
            current = candidate
        mean_loss = float(np.mean(epoch_losses))
        if history is not None:
            history.append(mean_loss)
        if (epoch + 1) % max(1, cfg.epochs // 10) == 0:
            logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: loss {mean_loss:.6g}")
    return current
