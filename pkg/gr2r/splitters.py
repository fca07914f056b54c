"""
Recorruption of a single noisy observation into a conditionally independent
pair (y1, y2) with y = (1 - alpha) * y1 + alpha * y2.

    gaussian   y1 = y + sqrt(alpha / (1 - alpha)) * w,  w ~ N(0, sigma^2)
    poisson    y1 = (y - gamma * w) / (1 - alpha),      w ~ Bin(z, alpha)
    gamma      y1 = y * (1 - w) / (1 - alpha),          w ~ Beta(l*alpha, l*(1 - alpha))
    binomial   y1 = (y - w / l) / (1 - alpha),          w ~ HypGeo(l, l*alpha, z)

y2 always follows from the recombination formula.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from gr2r.exceptions import ConfigError
from gr2r.nef_models import (
    BINOMIAL, GAMMA, GAUSSIAN, POISSON,
    ArrayLike, ImageTensor, NoiseModel,
    as_image, binomial_counts, check_observation,
    mean_variance, poisson_counts,
)
from gr2r.settings import setting

logger = logging.getLogger(__name__)

Estimator = Callable[[ImageTensor], ImageTensor]


@dataclass
class SplitPair:
    y1: ImageTensor
    y2: ImageTensor
    alpha: float

    def recombine(self) -> ImageTensor:
        return (1.0 - self.alpha) * self.y1 + self.alpha * self.y2


@dataclass(frozen=True)
class SplitConfig:
    alpha: float
    mc_samples: int = 1

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if int(self.mc_samples) != self.mc_samples or self.mc_samples < 1:
            raise ConfigError(f"mc_samples must be a positive integer, got {self.mc_samples}")


@dataclass
class SplitStatistics:
    mean1: float
    var1: float
    mean2: float
    var2: float
    cov12: float


@dataclass
class SplitMoments:
    """Elementwise conditional moments of (y1, y2)."""
    mean1: ImageTensor
    var1: ImageTensor
    mean2: ImageTensor
    var2: ImageTensor
    cov12: ImageTensor


@dataclass
class SnrValue:
    value: float
    infinite: bool = False


def default_alpha(model: NoiseModel) -> float:
    return float(setting('splitting', 'default_alpha', {}).get(model.family, 0.5))


def default_mc_samples(family: str) -> int:
    return int(setting('splitting', 'default_mc_samples', {}).get(family, 1))


def validate_alpha(model: NoiseModel, alpha: float) -> float:
    """Check 0 < alpha < 1 and, for Binomial, that looks * alpha is an integer."""
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if model.family == BINOMIAL:
        successes = model.looks * alpha
        if abs(successes - round(successes)) > 1e-9 or round(successes) < 1:
            raise ConfigError(
                f"looks * alpha must be a positive integer for binomial noise "
                f"(looks={model.looks}, alpha={alpha})")
    return alpha


def binomial_successes(model: NoiseModel, alpha: float) -> int:
    return int(round(model.looks * alpha))


def draw_omega(model: NoiseModel, y: ImageTensor, alpha: float,
               rng: np.random.Generator) -> np.ndarray:
    """Draw the auxiliary variable w conditioned on the observation only."""
    if model.family == GAUSSIAN:
        return model.sigma * rng.standard_normal(y.shape)
    if model.family == POISSON:
        return rng.binomial(poisson_counts(y, model.gamma_gain), alpha).astype(np.float64)
    if model.family == GAMMA:
        ell = model.looks
        return rng.beta(ell * alpha, ell * (1.0 - alpha), size=y.shape)
    ell = model.looks
    successes = binomial_successes(model, alpha)
    draws = binomial_counts(y, ell)
    return rng.hypergeometric(successes, ell - successes, draws).astype(np.float64)


def y1_from_omega(model: NoiseModel, y: ArrayLike, omega: ArrayLike, alpha: float) -> ImageTensor:
    y = as_image(y)
    omega = as_image(omega)
    if model.family == GAUSSIAN:
        return y + np.sqrt(alpha / (1.0 - alpha)) * omega
    if model.family == POISSON:
        return (y - model.gamma_gain * omega) / (1.0 - alpha)
    if model.family == GAMMA:
        return y * (1.0 - omega) / (1.0 - alpha)
    return (y - omega / model.looks) / (1.0 - alpha)


def y2_from_y1(y: ArrayLike, y1: ArrayLike, alpha: float) -> ImageTensor:
    return as_image(y) / alpha - (1.0 - alpha) / alpha * as_image(y1)


def split(model: NoiseModel, y: ArrayLike, alpha: float,
          rng: Optional[np.random.Generator] = None,
          omega: Optional[ArrayLike] = None) -> SplitPair:
    """
    Recorrupt `y` into (y1, y2).

    `omega` may be supplied to replace the random draw (e.g. zeros for a
    degenerate Gaussian stream); otherwise `rng` is required.
    """
    alpha = validate_alpha(model, alpha)
    y = check_observation(model, y)
    if omega is None:
        if rng is None:
            raise ConfigError("split needs either rng or an explicit omega")
        omega = draw_omega(model, y, alpha, rng)
    omega = np.broadcast_to(as_image(omega), y.shape)
    y1 = y1_from_omega(model, y, omega, alpha)
    return SplitPair(y1=y1, y2=y2_from_y1(y, y1, alpha), alpha=alpha)


def split_statistics_exact(model: NoiseModel, x: float, alpha: float,
                           tail_eps: Optional[float] = None) -> SplitStatistics:
    """Exact conditional moments of (y1, y2) given scalar x, by enumeration."""
    from gr2r.oracles import enumerate_split_law

    grid = enumerate_split_law(model, x, alpha, tail_eps)
    atoms = grid.atoms
    p = atoms['probability'].to_numpy()
    y1 = atoms['y1'].to_numpy()
    y2 = atoms['y2'].to_numpy()
    mass = p.sum()
    m1 = float(np.dot(p, y1) / mass)
    m2 = float(np.dot(p, y2) / mass)
    return SplitStatistics(
        mean1=m1,
        var1=float(np.dot(p, (y1 - m1) ** 2) / mass),
        mean2=m2,
        var2=float(np.dot(p, (y2 - m2) ** 2) / mass),
        cov12=float(np.dot(p, (y1 - m1) * (y2 - m2)) / mass),
    )


def split_moments(model: NoiseModel, alpha: float,
                  x: Optional[ArrayLike] = None,
                  y: Optional[ArrayLike] = None) -> SplitMoments:
    """
    Closed-form elementwise moments of (y1, y2), conditioned on the clean x
    or on the observation y (exactly one must be given).
    """
    if (x is None) == (y is None):
        raise ConfigError("split_moments needs exactly one of x or y")
    alpha = validate_alpha(model, alpha)

    if x is not None:
        mean, var = mean_variance(model, x)
        return SplitMoments(mean1=mean, var1=var / (1.0 - alpha),
                            mean2=mean.copy(), var2=var / alpha,
                            cov12=np.zeros_like(mean))

    y = check_observation(model, y)
    if model.family == GAUSSIAN:
        s2 = model.sigma ** 2
        tau2 = alpha / (1.0 - alpha)
        var1 = np.full_like(y, tau2 * s2)
        var2 = np.full_like(y, s2 / tau2)
        cov = np.full_like(y, -s2)
    elif model.family == POISSON:
        g = model.gamma_gain
        var1 = g * y * alpha / (1.0 - alpha)
        var2 = g * y * (1.0 - alpha) / alpha
        cov = -g * y
    elif model.family == GAMMA:
        scale = y ** 2 / (model.looks + 1.0)
        var1 = scale * alpha / (1.0 - alpha)
        var2 = scale * (1.0 - alpha) / alpha
        cov = -scale
    else:
        ell = model.looks
        z = binomial_counts(y, ell).astype(np.float64)
        var_w = z * alpha * (1.0 - alpha) * (ell - z) / (ell - 1.0)
        var1 = var_w / (ell * (1.0 - alpha)) ** 2
        var2 = var_w / (ell * alpha) ** 2
        cov = -var_w / (ell ** 2 * alpha * (1.0 - alpha))
    return SplitMoments(mean1=y.copy(), var1=var1, mean2=y.copy(), var2=var2, cov12=cov)


def snr(v_mean: ArrayLike, v_var: ArrayLike) -> SnrValue:
    """||E z||^2 / E||z - E z||^2."""
    v_mean = as_image(v_mean)
    v_var = as_image(v_var)
    if np.any(v_var < 0):
        raise ConfigError("Variances must be nonnegative")
    total_var = float(np.sum(v_var))
    signal = float(np.sum(v_mean ** 2))
    if signal == 0.0:
        raise ConfigError("SNR is undefined for an all-zero mean")
    if total_var == 0.0:
        return SnrValue(value=float('inf'), infinite=True)
    return SnrValue(value=signal / total_var)


def mc_inference(f: Estimator, model: NoiseModel, y: ArrayLike, alpha: float, J: int,
                 rng: np.random.Generator, jobs: int = 1) -> ImageTensor:
    """
    Average f over J independent recorruptions of the same y.

    Each draw uses its own spawned substream, so the result does not depend
    on `jobs`; the sum is reduced in substream order.
    """
    if int(J) != J or J < 1:
        raise ConfigError(f"J must be a positive integer, got {J}")
    y = as_image(y)
    streams = rng.spawn(int(J))

    def one(stream):
        return np.asarray(f(split(model, y, alpha, stream).y1), dtype=np.float64)

    if jobs > 1 and J > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(one, streams))
    else:
        outputs = [one(s) for s in streams]

    total = np.zeros_like(outputs[0])
    for out in outputs:
        total = total + out
    return total / J
