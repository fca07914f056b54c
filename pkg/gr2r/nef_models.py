"""
Natural exponential family noise models.

Four families are supported, all parameterized so that E{y|x} = x:

    gaussian   y ~ N(x, sigma^2)
    poisson    z ~ P(x / gamma), y = gamma * z
    gamma      y ~ Gamma(shape=looks, rate=looks / x)
    binomial   z ~ Bin(looks, x), y = z / looks

Densities are written h(y) exp(y * eta(x) - phi(x)); h is never evaluated
because every loss in the package only needs terms that depend on the mean.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from gr2r.exceptions import ConfigError, DomainError
from gr2r.settings import setting

logger = logging.getLogger(__name__)

GAUSSIAN = 'gaussian'
POISSON = 'poisson'
GAMMA = 'gamma'
BINOMIAL = 'binomial'
FAMILIES = (GAUSSIAN, POISSON, GAMMA, BINOMIAL)
DISCRETE_FAMILIES = (POISSON, BINOMIAL)

# Pixel arrays are plain float64 numpy arrays; shape is (height, width) or (n,).
ImageTensor = np.ndarray
ArrayLike = Union[np.ndarray, Sequence[float], float]


def as_image(data: ArrayLike, shape: Optional[Tuple[int, ...]] = None) -> ImageTensor:
    """Return `data` as a float64 array, reshaped to `shape` when given."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise ConfigError(f"Cannot reshape {arr.size} values to {shape}")
        arr = arr.reshape(shape)
    return arr


def domain_margin() -> float:
    return float(setting('splitting', 'domain_margin', 1e-12))


def _first_bad(mask: np.ndarray) -> int:
    return int(np.flatnonzero(np.ravel(mask))[0])


@dataclass(frozen=True)
class NoiseModel:
    """Tagged noise family descriptor carrying its single parameter."""

    family: str
    sigma: Optional[float] = None
    gamma_gain: Optional[float] = None
    looks: Optional[int] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"Unknown noise family '{self.family}'")
        expected = {
            GAUSSIAN: 'sigma',
            POISSON: 'gamma_gain',
            GAMMA: 'looks',
            BINOMIAL: 'looks',
        }[self.family]
        for name in ('sigma', 'gamma_gain', 'looks'):
            value = getattr(self, name)
            if name == expected and value is None:
                raise ConfigError(f"{self.family} model requires '{name}'")
            if name != expected and value is not None:
                raise ConfigError(f"{self.family} model does not take '{name}'")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.gamma_gain is not None and not self.gamma_gain > 0:
            raise ConfigError(f"gamma_gain must be > 0, got {self.gamma_gain}")
        if self.looks is not None:
            if int(self.looks) != self.looks or self.looks < 1:
                raise ConfigError(f"looks must be a positive integer, got {self.looks}")
            object.__setattr__(self, 'looks', int(self.looks))

    @classmethod
    def gaussian(cls, sigma: float) -> 'NoiseModel':
        return cls(GAUSSIAN, sigma=float(sigma))

    @classmethod
    def poisson(cls, gamma_gain: float = 1.0) -> 'NoiseModel':
        return cls(POISSON, gamma_gain=float(gamma_gain))

    @classmethod
    def gamma(cls, looks: int) -> 'NoiseModel':
        return cls(GAMMA, looks=looks)

    @classmethod
    def binomial(cls, looks: int) -> 'NoiseModel':
        return cls(BINOMIAL, looks=looks)

    @classmethod
    def from_dict(cls, spec: dict) -> 'NoiseModel':
        """Build from {'family': ..., 'params': {...}} as used in run configs."""
        family = spec.get('family')
        params = dict(spec.get('params', {}))
        try:
            return cls(family, **params)
        except TypeError as e:
            raise ConfigError(f"Bad parameters for {family}: {e}") from e

    def to_dict(self) -> dict:
        params = {k: getattr(self, k) for k in ('sigma', 'gamma_gain', 'looks')
                  if getattr(self, k) is not None}
        return {'family': self.family, 'params': params}

    @property
    def is_discrete(self) -> bool:
        return self.family in DISCRETE_FAMILIES

    def __str__(self) -> str:
        params = ', '.join(f"{k}={v}" for k, v in self.to_dict()['params'].items())
        return f"{self.family}({params})"


def check_mean_domain(model: NoiseModel, x: ArrayLike, interior: bool = False) -> ImageTensor:
    """
    Validate that every entry of `x` is a legal mean for the family.

    With interior=True the open domain is enforced with the configured margin
    (needed wherever log or 1/v is taken). Otherwise Poisson accepts x = 0,
    which is a degenerate but valid rate.
    """
    x = as_image(x)
    if not np.all(np.isfinite(x)):
        raise DomainError("Mean must be finite", _first_bad(~np.isfinite(x)))
    if model.family == GAUSSIAN:
        return x
    margin = domain_margin()
    if model.family == POISSON and not interior:
        bad = x < 0
    elif model.family in (POISSON, GAMMA):
        bad = x <= (margin if interior else 0.0)
    else:
        lo, hi = (margin, 1.0 - margin) if interior else (0.0, 1.0)
        bad = (x <= lo) | (x >= hi)
    if np.any(bad):
        idx = _first_bad(bad)
        raise DomainError(
            f"Value {np.ravel(x)[idx]!r} outside the {model.family} mean domain", idx)
    return x


def poisson_counts(y: ArrayLike, gamma_gain: float) -> np.ndarray:
    """Convert gamma-lattice observations to integer counts z = y / gamma."""
    tol = float(setting('splitting', 'lattice_tol', 1e-9))
    z = as_image(y) / gamma_gain
    rounded = np.round(z)
    bad = (np.abs(z - rounded) > tol) | (rounded < 0)
    if np.any(bad):
        idx = _first_bad(bad)
        raise DomainError(
            f"Observation {np.ravel(as_image(y))[idx]!r} is not a nonnegative multiple of gamma={gamma_gain}",
            idx)
    return rounded.astype(np.int64)


def binomial_counts(y: ArrayLike, looks: int) -> np.ndarray:
    """Convert k / looks observations to integer counts k."""
    tol = float(setting('splitting', 'lattice_tol', 1e-9))
    z = as_image(y) * looks
    rounded = np.round(z)
    bad = (np.abs(z - rounded) > tol) | (rounded < 0) | (rounded > looks)
    if np.any(bad):
        idx = _first_bad(bad)
        raise DomainError(
            f"Observation {np.ravel(as_image(y))[idx]!r} is not of the form k/{looks}", idx)
    return rounded.astype(np.int64)


def check_observation(model: NoiseModel, y: ArrayLike) -> ImageTensor:
    """Validate a noisy observation against the family's support."""
    y = as_image(y)
    if model.family == POISSON:
        poisson_counts(y, model.gamma_gain)
    elif model.family == BINOMIAL:
        binomial_counts(y, model.looks)
    elif model.family == GAMMA:
        bad = ~(y > 0)
        if np.any(bad):
            raise DomainError("Gamma observations must be > 0", _first_bad(bad))
    elif not np.all(np.isfinite(y)):
        raise DomainError("Observation must be finite", _first_bad(~np.isfinite(y)))
    return y


def sample_noisy(model: NoiseModel, x: ArrayLike, rng: np.random.Generator) -> ImageTensor:
    """Draw y ~ p(y|x) with E{y|x} = x."""
    x = check_mean_domain(model, x)
    if model.family == GAUSSIAN:
        return x + model.sigma * rng.standard_normal(x.shape)
    if model.family == POISSON:
        return model.gamma_gain * rng.poisson(x / model.gamma_gain).astype(np.float64)
    if model.family == GAMMA:
        # shape looks, rate looks / x  ->  numpy scale x / looks
        return rng.gamma(shape=model.looks, scale=x / model.looks)
    return rng.binomial(model.looks, x).astype(np.float64) / model.looks


def mean_variance(model: NoiseModel, x: ArrayLike) -> Tuple[ImageTensor, ImageTensor]:
    """Conditional mean (x itself) and elementwise variance of y given x."""
    x = check_mean_domain(model, x)
    if model.family == GAUSSIAN:
        var = np.full_like(x, model.sigma ** 2)
    elif model.family == POISSON:
        var = model.gamma_gain * x
    elif model.family == GAMMA:
        var = x ** 2 / model.looks
    else:
        var = x * (1.0 - x) / model.looks
    return x, var


def eta_phi(model: NoiseModel, v: ArrayLike) -> Tuple[ImageTensor, ImageTensor]:
    """
    Natural parameter eta(v) and log-partition phi(v) at mean v.

    Poisson carries the 1/gamma factor and Binomial the looks factor so that
    the density is exp(y * eta - phi) in the observation scale y.
    """
    v = check_mean_domain(model, v, interior=True)
    if model.family == GAUSSIAN:
        s2 = model.sigma ** 2
        return v / s2, v ** 2 / (2.0 * s2)
    if model.family == POISSON:
        g = model.gamma_gain
        return np.log(v) / g, v / g
    if model.family == GAMMA:
        ell = model.looks
        return -ell / v, ell * np.log(v)
    ell = model.looks
    return ell * np.log(v / (1.0 - v)), -ell * np.log1p(-v)


def family_nll(model: NoiseModel, y: ArrayLike, v: ArrayLike) -> float:
    """Negative log-density summed over pixels, without the -log h(y) term."""
    y = as_image(y)
    eta, phi = eta_phi(model, v)
    if eta.shape != y.shape:
        eta, phi = np.broadcast_to(eta, y.shape), np.broadcast_to(phi, y.shape)
    return float(np.sum(phi - y * eta))
