"""
Brute-force reference computations used to check the splitting identities:
exact enumeration of discrete split laws, Monte-Carlo expectations with
4-standard-error bands, and Bayes posteriors for small discrete priors.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from gr2r.exceptions import ConfigError, DomainError, UnsupportedFamilyError
from gr2r.nef_models import (
    BINOMIAL, POISSON, NoiseModel,
    binomial_counts, check_mean_domain, poisson_counts,
)
from gr2r.settings import setting
from gr2r.splitters import binomial_successes, validate_alpha, y1_from_omega, y2_from_y1

logger = logging.getLogger(__name__)

GRID_COLUMNS = ['y', 'omega', 'y1', 'y2', 'cond_weight', 'probability']
KEY_DECIMALS = 9
CI_STANDARD_ERRORS = 4.0


def default_tail_eps() -> float:
    return float(setting('splitting', 'tail_eps', 1e-12))


@dataclass
class EnumerationGrid:
    """Joint atoms of (y, w) with y1, y2 and exact probabilities."""
    atoms: pd.DataFrame
    tail_mass_dropped: float = 0.0

    @property
    def total_mass(self) -> float:
        return float(self.atoms['probability'].sum())

    @property
    def feasible_atoms(self) -> pd.DataFrame:
        """Atoms whose w is possible given y; the lattice also keeps w with zero weight."""
        return self.atoms[self.atoms['cond_weight'] > 0].reset_index(drop=True)

    def marginal(self, column: str) -> pd.Series:
        """Probability of each distinct value of `column`."""
        keys = self.atoms[column].round(KEY_DECIMALS)
        return self.atoms['probability'].groupby(keys).sum()

    def to_csv(self, path: str):
        """Write atom, probability, y1, y2 columns of the feasible atoms for debugging."""
        atoms = self.feasible_atoms
        out = pd.DataFrame({
            'atom': np.arange(len(atoms)),
            'probability': atoms['probability'].to_numpy(),
            'y1': atoms['y1'].to_numpy(),
            'y2': atoms['y2'].to_numpy(),
        })
        out.to_csv(path, index=False, float_format='%.17g')


@dataclass
class CIResult:
    mean: float
    half_width: float

    def contains(self, value: float) -> bool:
        return abs(value - self.mean) <= self.half_width


def _require_discrete(model: NoiseModel):
    if model.family not in (POISSON, BINOMIAL):
        raise UnsupportedFamilyError(
            f"Exact enumeration needs a discrete family, got {model.family}; "
            f"use the Monte-Carlo path instead")


def poisson_truncation(rate: float, tail_eps: float) -> int:
    """Smallest Z with P(z > Z) < tail_eps."""
    if rate == 0.0:
        return 0
    z_max = int(stats.poisson.isf(tail_eps, rate))
    while stats.poisson.sf(z_max, rate) >= tail_eps:
        z_max += 1
    while z_max > 0 and stats.poisson.sf(z_max - 1, rate) < tail_eps:
        z_max -= 1
    return z_max


def _omega_law(model: NoiseModel, count: int, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """Support and pmf of w given the observed count; never reads x."""
    if model.family == POISSON:
        omega = np.arange(count + 1)
        return omega, stats.binom.pmf(omega, count, alpha)
    successes = binomial_successes(model, alpha)
    omega = np.arange(successes + 1)
    return omega, stats.hypergeom.pmf(omega, model.looks, successes, count)


def _atoms_for_counts(model: NoiseModel, counts: np.ndarray, count_probs: np.ndarray,
                      alpha: float) -> pd.DataFrame:
    scale = model.gamma_gain if model.family == POISSON else 1.0 / model.looks
    frames = []
    for count, p_count in zip(counts, count_probs):
        omega, w_probs = _omega_law(model, int(count), alpha)
        y = np.full(omega.shape, count * scale, dtype=np.float64)
        y1 = y1_from_omega(model, y, omega.astype(np.float64), alpha)
        frames.append(pd.DataFrame({
            'y': y,
            'omega': omega,
            'y1': y1,
            'y2': y2_from_y1(y, y1, alpha),
            'cond_weight': w_probs,
            'probability': p_count * w_probs,
        }))
    return pd.concat(frames, ignore_index=True)[GRID_COLUMNS]


def enumerate_split_law(model: NoiseModel, x: float, alpha: float,
                        tail_eps: Optional[float] = None) -> EnumerationGrid:
    """Joint law of (y, y1, y2) given scalar x."""
    _require_discrete(model)
    alpha = validate_alpha(model, alpha)
    tail_eps = default_tail_eps() if tail_eps is None else tail_eps
    x = float(check_mean_domain(model, x))

    if model.family == POISSON:
        rate = x / model.gamma_gain
        z_max = poisson_truncation(rate, tail_eps)
        counts = np.arange(z_max + 1)
        probs = stats.poisson.pmf(counts, rate) if rate > 0 else np.array([1.0])
        dropped = float(stats.poisson.sf(z_max, rate)) if rate > 0 else 0.0
    else:
        counts = np.arange(model.looks + 1)
        probs = stats.binom.pmf(counts, model.looks, x)
        dropped = 0.0

    atoms = _atoms_for_counts(model, counts, probs, alpha)
    logger.debug(f"Enumerated {len(atoms)} atoms for {model} at x={x}, alpha={alpha}")
    return EnumerationGrid(atoms=atoms, tail_mass_dropped=dropped)


def enumerate_split_given(model: NoiseModel, y: float, alpha: float) -> EnumerationGrid:
    """Law of (y1, y2) given a fixed scalar observation y."""
    _require_discrete(model)
    alpha = validate_alpha(model, alpha)
    if model.family == POISSON:
        count = int(poisson_counts(y, model.gamma_gain))
    else:
        count = int(binomial_counts(y, model.looks))
    atoms = _atoms_for_counts(model, np.array([count]), np.array([1.0]), alpha)
    return EnumerationGrid(atoms=atoms, tail_mass_dropped=0.0)


def expected_functional(grid: EnumerationGrid,
                        functional: Callable[[pd.DataFrame], np.ndarray]) -> float:
    """
    Sum of probability * functional(atom) over the grid.

    `functional` is vectorized: it receives the atom table and returns one
    value per row.
    """
    values = np.asarray(functional(grid.atoms), dtype=np.float64)
    probs = grid.atoms['probability'].to_numpy()
    if values.shape == ():
        values = np.full(probs.shape, float(values))
    live = probs > 0
    if not np.all(np.isfinite(values[live])):
        bad = int(np.flatnonzero(live & ~np.isfinite(values))[0])
        raise DomainError("Functional is not finite on an atom", bad)
    return float(np.dot(probs[live], values[live]))


PriorLike = Union[Mapping[float, float], Sequence[Tuple[float, float]]]


def _prior_items(prior: PriorLike) -> Dict[float, float]:
    items = dict(prior.items()) if isinstance(prior, Mapping) else dict(prior)
    if not items:
        raise ConfigError("Prior must have at least one support point")
    total = sum(items.values())
    if total <= 0 or any(w < 0 for w in items.values()):
        raise ConfigError("Prior weights must be nonnegative and not all zero")
    return {float(x): w / total for x, w in items.items()}


def y1_likelihood(model: NoiseModel, x: float, alpha: float, y1_value: float,
                  tail_eps: Optional[float] = None) -> float:
    """p1(y1 = y1_value | x) from the marginalized split grid."""
    marginal = enumerate_split_law(model, x, alpha, tail_eps).marginal('y1')
    return float(marginal.get(round(float(y1_value), KEY_DECIMALS), 0.0))


def toy_posterior_mean(prior: PriorLike, model: NoiseModel, alpha: float, y1_value: float,
                       tail_eps: Optional[float] = None) -> float:
    """E[x | y1 = y1_value] under a finite prior."""
    prior = _prior_items(prior)
    weights = {x: w * y1_likelihood(model, x, alpha, y1_value, tail_eps)
               for x, w in prior.items()}
    evidence = sum(weights.values())
    if evidence <= 0.0:
        raise DomainError(f"y1={y1_value} is not reachable under the prior")
    return sum(x * w for x, w in weights.items()) / evidence


def ci_expectation(sampler: Callable[[np.random.Generator, int], np.ndarray],
                   functional: Callable[[np.ndarray], np.ndarray],
                   N: int, seed: int) -> CIResult:
    """Sample mean of functional(samples) with a 4-standard-error half-width."""
    if N < 100:
        raise ConfigError(f"ci_expectation needs N >= 100, got {N}")
    rng = np.random.default_rng(seed)
    values = np.asarray(functional(sampler(rng, N)), dtype=np.float64)
    values = np.broadcast_to(values, (N,)) if values.ndim == 0 else values
    half_width = CI_STANDARD_ERRORS * float(np.std(values, ddof=1)) / np.sqrt(len(values))
    return CIResult(mean=float(np.mean(values)), half_width=half_width)
