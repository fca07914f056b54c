"""
Recorruption for non-Gaussian additive noise y = x + e.

The synthetic noise w of the pair (y + tau w, y - w / tau) is matched to the
moments of e: E w^2 = E e^2 removes the first-order error term and
E w^3 = E e^3 / tau the second-order one. Samples satisfying the targets are
produced by gradient descent on the empirical moment residuals.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import stats

from gr2r.exceptions import ConfigError, ConvergenceError, ShapeError
from gr2r.nef_models import ArrayLike, ImageTensor, as_image
from gr2r.settings import setting
from gr2r.splitters import SplitPair

logger = logging.getLogger(__name__)

SUPPORTED_ORDERS = (2, 3)

# log R for R ~ Rayleigh(s): mean ln s + (ln 2 - gamma_EM) / 2, variance pi^2 / 24
LOG_RAYLEIGH_MEAN_SHIFT = 0.5 * (np.log(2.0) - np.euler_gamma)
LOG_RAYLEIGH_STD = np.pi / np.sqrt(24.0)


@dataclass
class MomentSpec:
    """Raw moment targets mu_1..mu_k for the synthetic noise, with R2R scale tau."""
    moments: Sequence[float]
    tau: float = 1.0

    def __post_init__(self):
        self.moments = [float(m) for m in self.moments]
        if self.order < 2:
            raise ConfigError(f"Moment order must be >= 2, got {self.order}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.variance > 0:
            raise ConfigError(f"Moment targets imply a nonpositive variance {self.variance}")

    @property
    def order(self) -> int:
        return len(self.moments)

    @property
    def variance(self) -> float:
        return self.moments[1] - self.moments[0] ** 2


@dataclass(frozen=True)
class GdConfig:
    step_size: Optional[float] = None
    max_iters: int = 10000
    rel_tol: float = 0.1

    def __post_init__(self):
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if not self.rel_tol > 0:
            raise ConfigError(f"rel_tol must be > 0, got {self.rel_tol}")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")

    @classmethod
    def from_settings(cls) -> 'GdConfig':
        return cls(step_size=setting('moments', 'step_size', None),
                   max_iters=int(setting('moments', 'max_iters', 10000)),
                   rel_tol=float(setting('moments', 'rel_tol', 0.1)))


def log_rayleigh_sample(sigma: float, n: int, rng: np.random.Generator,
                        scale: float = 1.0) -> np.ndarray:
    """Zero-mean log-Rayleigh noise with standard deviation sigma (left-skewed)."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    log_r = np.log(rng.rayleigh(scale, size=int(n)))
    standard = (log_r - (np.log(scale) + LOG_RAYLEIGH_MEAN_SHIFT)) / LOG_RAYLEIGH_STD
    return sigma * standard


def target_moments(noise_samples: ArrayLike, k: int, tau: float) -> MomentSpec:
    """mu_1 = 0, mu_2 = E e^2 and, for k = 3, mu_3 = E e^3 / tau."""
    if k not in SUPPORTED_ORDERS:
        raise ConfigError(f"Only moment orders {SUPPORTED_ORDERS} are supported, got {k}")
    e = as_image(noise_samples).ravel()
    if e.size == 0:
        raise ConfigError("Noise samples are empty")
    moments = [0.0, float(np.mean(e ** 2))]
    if k == 3:
        moments.append(float(np.mean(e ** 3)) / tau)
    return MomentSpec(moments=moments, tau=tau)


def moment_residuals(z: np.ndarray, spec: MomentSpec) -> Dict[int, float]:
    """Relative error per order, or the standardized absolute error for zero targets."""
    scale = np.sqrt(spec.moments[1])
    residuals = {}
    for i, mu in enumerate(spec.moments, start=1):
        m = float(np.mean(z ** i))
        if mu != 0.0:
            residuals[i] = abs(m - mu) / abs(mu)
        else:
            residuals[i] = abs(m) / scale ** i
    return residuals


def maxent_sample(spec: MomentSpec, n: int, cfg: GdConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Samples whose first k empirical moments meet the targets.

    Starts from N(mu_1, mu_2 - mu_1^2) and descends sum_i (m_i - nu_i)^2 / (2i)
    in standardized units u = z / sqrt(mu_2), where nu_i = mu_i / mu_2^(i/2).
    Raises ConvergenceError with the last residuals if max_iters is exhausted.
    """
    if n < 2:
        raise ConfigError(f"Need at least two samples, got {n}")
    k = spec.order
    scale = np.sqrt(spec.moments[1])
    nu = np.array([mu / scale ** i for i, mu in enumerate(spec.moments, start=1)])
    step = cfg.step_size if cfg.step_size is not None else 0.1 / k

    z = spec.moments[0] + np.sqrt(spec.variance) * rng.standard_normal(int(n))
    u = z / scale
    powers = np.arange(1, k + 1)

    for iteration in range(cfg.max_iters + 1):
        residuals = moment_residuals(u * scale, spec)
        if all(r < cfg.rel_tol for r in residuals.values()):
            logger.debug(f"maxent_sample converged after {iteration} iterations: {residuals}")
            return u * scale
        if iteration == cfg.max_iters:
            break
        m = np.array([np.mean(u ** i) for i in powers])
        coeffs = m - nu
        # n times d/du_j of sum_i (m_i - nu_i)^2 / (2i)
        grad = np.zeros_like(u)
        for i, c in zip(powers, coeffs):
            grad += c * u ** (i - 1)
        u = u - step * grad
        if not np.all(np.isfinite(u)):
            raise ConvergenceError("Moment matching diverged", residuals)

    raise ConvergenceError(
        f"Moment matching did not reach rel_tol={cfg.rel_tol} in {cfg.max_iters} iterations",
        residuals)


def r2r_additive_split(y: ArrayLike, omega: ArrayLike, tau: float) -> SplitPair:
    """(y + tau w, y - w / tau); alpha records the equivalent tau^2 / (1 + tau^2)."""
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    y = as_image(y)
    omega = as_image(omega)
    if y.shape != omega.shape:
        raise ShapeError(f"y shape {y.shape} does not match noise shape {omega.shape}")
    return SplitPair(y1=y + tau * omega, y2=y - omega / tau, alpha=alpha_equivalent(tau))


def alpha_equivalent(tau: float) -> float:
    return tau ** 2 / (1.0 + tau ** 2)


def gaussian_recorruption_noise(noise_samples: ArrayLike, shape, rng: np.random.Generator) -> ImageTensor:
    """Plain R2R baseline: w ~ N(0, E e^2), matching the second moment only."""
    e = as_image(noise_samples).ravel()
    return np.sqrt(float(np.mean(e ** 2))) * rng.standard_normal(shape)


def error_term(noise: np.ndarray, omega: np.ndarray, tau: float, k: int) -> np.ndarray:
    """Per-draw (e - w / tau)(e + tau w)^k; its mean vanishes when moments match."""
    return (noise - omega / tau) * (noise + tau * omega) ** k


def describe_moments(samples: ArrayLike, k: int = 3) -> Dict[str, float]:
    e = as_image(samples).ravel()
    summary = {f"m{i}": float(np.mean(e ** i)) for i in range(1, k + 1)}
    summary['std'] = float(np.std(e))
    summary['skewness'] = float(stats.skew(e))
    return summary
