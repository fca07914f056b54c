"""
Oracle suite behind `gr2r verify`.

Each check returns a CheckResult with a residual and the tolerance it was
held to. Checks draw randomness from numpy Generators seeded with
(seed, check index), so a report depends only on the seed.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import binom, poisson

from gr2r import additive_matching as am
from gr2r import inverse_ops as iops
from gr2r import losses
from gr2r.estimators import Estimator
from gr2r.exceptions import ConfigError
from gr2r.nef_models import POISSON, NoiseModel, mean_variance, sample_noisy
from gr2r.oracles import (
    KEY_DECIMALS, ci_expectation, enumerate_split_law, expected_functional, toy_posterior_mean,
)
from gr2r.settings import setting
from gr2r.splitters import split, split_statistics_exact

logger = logging.getLogger(__name__)

PASS = 'pass'
FAIL = 'fail'
ERROR = 'error'

POISSON_GRID = [(g, x, a) for g in (0.5, 1.0) for x in (0.5, 1.0, 2.0) for a in (0.15, 0.5)]
BINOMIAL_GRID = [(10, x, a) for x in (0.3, 0.5) for a in (0.1, 0.5)]
X_PAIRS = [(NoiseModel.poisson(0.5), 0.15, (0.5, 2.0)), (NoiseModel.poisson(1.0), 0.5, (1.0, 2.0)),
           (NoiseModel.binomial(10), 0.1, (0.3, 0.5)), (NoiseModel.binomial(10), 0.5, (0.3, 0.5))]
SURE_ALPHAS = (0.1, 0.03, 0.01)


@dataclass
class CheckResult:
    check_id: str
    module: str
    status: str
    residual: Optional[float]
    tolerance: Optional[float]
    detail: str = ''


def _tolerance() -> float:
    return float(setting('verify', 'tolerance', 1e-8))


def _mc_draws() -> int:
    return int(setting('verify', 'mc_draws', 1000000))


def _discrete_cases():
    for gamma_gain, x, alpha in POISSON_GRID:
        yield NoiseModel.poisson(gamma_gain), x, alpha
    for looks, x, alpha in BINOMIAL_GRID:
        yield NoiseModel.binomial(looks), x, alpha


def _four_se_residual(values: np.ndarray, target: float) -> float:
    """|mean - target| in units of four standard errors."""
    half_width = 4.0 * float(np.std(values, ddof=1)) / np.sqrt(values.size)
    return abs(float(np.mean(values)) - target) / half_width


def _result(check_id, module, residual, tolerance, detail='') -> CheckResult:
    status = PASS if residual <= tolerance else FAIL
    return CheckResult(check_id, module, status, float(residual), float(tolerance), detail)


# -- splitters --------------------------------------------------------------

def check_split_moments(rng) -> Tuple[float, float, str]:
    worst = 0.0
    for model, x, alpha in _discrete_cases():
        stats = split_statistics_exact(model, x, alpha, tail_eps=1e-12)
        _, var = mean_variance(model, x)
        var = float(var)
        worst = max(worst,
                    abs(stats.mean1 - x), abs(stats.mean2 - x),
                    abs(stats.var1 - var / (1 - alpha)), abs(stats.var2 - var / alpha),
                    abs(stats.cov12))
    return worst, _tolerance(), f"{len(POISSON_GRID) + len(BINOMIAL_GRID)} cases"


def continuous_split_residual(model: NoiseModel, x: float, alpha: float, n: int,
                               rng: np.random.Generator) -> float:
    """
    Worst deviation of the sampled split moments (both means, var1, var2,
    cov12) from their targets, in units of the 4-SE half width.
    """
    y = sample_noisy(model, np.full(n, x), rng)
    pair = split(model, y, alpha, rng)
    _, var = mean_variance(model, x)
    var = float(var)
    d1, d2 = pair.y1 - x, pair.y2 - x
    targets = ((d1, 0.0), (d2, 0.0), (d1 ** 2, var / (1 - alpha)), (d2 ** 2, var / alpha), (d1 * d2, 0.0))
    return max(_four_se_residual(values, target) for values, target in targets)


def check_split_moments_continuous(rng) -> Tuple[float, float, str]:
    n = _mc_draws()
    worst = max(continuous_split_residual(NoiseModel.gaussian(0.2), 0.5, 0.5, n, rng),
                continuous_split_residual(NoiseModel.gamma(5), 1.0, 0.2, n, rng))
    return worst, 1.0, f"gaussian and gamma, {n} draws, residual in 4-SE units"


def check_recombination(rng) -> Tuple[float, float, str]:
    worst = 0.0
    x = rng.uniform(0.1, 0.9, size=(8, 8))
    for model, alpha in ((NoiseModel.gaussian(0.1), 0.5), (NoiseModel.poisson(0.5), 0.15),
                         (NoiseModel.gamma(5), 0.2), (NoiseModel.binomial(10), 0.5)):
        y = sample_noisy(model, x, rng)
        pair = split(model, y, alpha, rng)
        worst = max(worst, float(np.max(np.abs(pair.recombine() - y))))
    return worst, 1e-12, '4 families'


# -- losses ---------------------------------------------------------------------

def check_unbiasedness_mse(rng) -> Tuple[float, float, str]:
    f, g = Estimator.identity(), Estimator.affine(0.5, 0.0)
    worst = 0.0
    for model, x, alpha in _discrete_cases():
        def exp(est, loss):
            return losses.expected_loss(model, est, loss, alpha, x=x, method='enumerate').value
        lhs = exp(f, losses.GR2R_MSE) - exp(g, losses.GR2R_MSE)
        rhs = exp(f, losses.SUP_MSE) - exp(g, losses.SUP_MSE)
        worst = max(worst, abs(lhs - rhs))
    return worst, _tolerance(), 'identity vs affine a=0.5'


def check_unbiasedness_nll(rng) -> Tuple[float, float, str]:
    f, g = Estimator.affine(0.5, 0.2), Estimator.constant(0.5)
    worst = 0.0
    for model, x, alpha in _discrete_cases():
        def exp(est, loss):
            return losses.expected_loss(model, est, loss, alpha, x=x, method='enumerate').value
        lhs = exp(f, losses.GR2R_NLL) - exp(g, losses.GR2R_NLL)
        rhs = exp(f, losses.SUP_NLL) - exp(g, losses.SUP_NLL)
        worst = max(worst, abs(lhs - rhs))
    return worst, _tolerance(), 'affine vs constant'


def nll_grid_argmins(prior: Dict[float, float], model: NoiseModel, alpha: float,
                     step: float = 1e-3, upper: float = 4.0,
                     min_mass: float = 1e-9) -> List[Tuple[float, float]]:
    """(y1, argmin_c E[NLL(y2; c) | y1]) over constant estimators c on a grid."""
    total = sum(prior.values())
    weights: Dict[float, List[float]] = {}
    for x, w in prior.items():
        atoms = enumerate_split_law(model, x, alpha).atoms
        keyed = atoms.assign(key=atoms['y1'].round(9), wp=atoms['probability'] * w / total)
        for key, grp in keyed.groupby('key'):
            a, b = weights.get(key, [0.0, 0.0])
            weights[key] = [a + grp['wp'].sum(), b + (grp['wp'] * grp['y2']).sum()]
    grid = np.arange(step, upper + step / 2, step)
    out = []
    for key in sorted(weights):
        mass, first = weights[key]
        if mass < min_mass:
            continue
        # c - t log c is linear in t, so the conditional NLL needs only E[y2 | y1]
        values = mass * grid - first * np.log(grid)
        out.append((float(key), float(grid[int(np.argmin(values))])))
    return out


def check_nll_minimizer(rng) -> Tuple[float, float, str]:
    prior = {1.0: 0.5, 2.0: 0.5}
    model = NoiseModel.poisson(1.0)
    worst = 0.0
    argmins = nll_grid_argmins(prior, model, 0.5)
    for y1, c_star in argmins:
        worst = max(worst, abs(c_star - toy_posterior_mean(prior, model, 0.5, y1)))
    return worst, 2e-3, f"{len(argmins)} reachable y1 values"


def sure_limit_gaps(sigma: float = 0.1, a: float = 0.8, b: float = 0.05,
                    alphas=SURE_ALPHAS, seed: int = 0) -> List[float]:
    model = NoiseModel.gaussian(sigma)
    y = np.random.default_rng(seed).uniform(0.1, 0.9, size=16)
    f, g = Estimator.affine(a, b), Estimator.identity()
    target = (losses.sure_gaussian(f, y, sigma).value - losses.sure_gaussian(g, y, sigma).value)
    gaps = []
    for alpha in alphas:
        diff = (losses.expected_loss(model, f, losses.GR2R_MSE, alpha, y=y, method='moments').value
                - losses.expected_loss(model, g, losses.GR2R_MSE, alpha, y=y, method='moments').value)
        gaps.append(abs(diff - target))
    return gaps


def check_sure_limit_gaussian(rng) -> Tuple[float, float, str]:
    gaps = sure_limit_gaps()
    monotone = all(later < earlier for earlier, later in zip(gaps, gaps[1:]))
    residual = gaps[-1] if monotone else float('inf')
    return residual, 1e-3, 'gaps ' + ', '.join(f"{g:.3g}" for g in gaps)


def poisson_limit_gap(alpha: float = 0.01, gamma_gain: float = 0.5, a: float = 0.95,
                      y: float = 1.0) -> float:
    model = NoiseModel.poisson(gamma_gain)
    y_arr = np.array([y])
    f, g = Estimator.affine(a, 0.0), Estimator.identity()
    diff = (losses.expected_loss(model, f, losses.GR2R_MSE, alpha, y=y_arr).value
            - losses.expected_loss(model, g, losses.GR2R_MSE, alpha, y=y_arr).value)
    target = (losses.pure_limit_poisson(f, y_arr, gamma_gain).value
              - losses.pure_limit_poisson(g, y_arr, gamma_gain).value)
    return abs(diff - target)


def check_poisson_limit(rng) -> Tuple[float, float, str]:
    return poisson_limit_gap(), 1e-3, 'alpha=0.01'


def check_gamma_recursion(rng) -> Tuple[float, float, str]:
    looks, alpha = 5, 0.2
    seed = int(rng.integers(2 ** 31))
    worst = 0.0
    for k in range(1, 5):
        ratio = (looks * alpha + k - 1) / (looks + k - 1)
        ci = ci_expectation(lambda r, n: r.beta(looks * alpha, looks * (1 - alpha), n),
                            lambda w, k=k, ratio=ratio: w ** k - ratio * w ** (k - 1),
                            _mc_draws(), seed + k)
        worst = max(worst, abs(ci.mean) / ci.half_width if ci.half_width > 0 else 0.0)
    return worst, 1.0, 'residual in units of the 4-SE half width'


def check_gamma_series_limit(rng) -> Tuple[float, float, str]:
    model = NoiseModel.gamma(5)
    y = rng.uniform(0.5, 1.5, size=8)
    f, g = Estimator.affine(0.9, 0.02), Estimator.identity()
    alpha = 1e-3
    diff = (losses.expected_loss(model, f, losses.GR2R_MSE, alpha, y=y, method='moments').value
            - losses.expected_loss(model, g, losses.GR2R_MSE, alpha, y=y, method='moments').value)
    series = losses.BETA_MOMENT_COEFFICIENTS
    target = (losses.sure_gamma_series(f, y, 5, coefficients=series).value
              - losses.sure_gamma_series(g, y, 5, coefficients=series).value)
    return abs(diff - target), 1e-3, 'beta-moment coefficients, alpha=1e-3'


def check_gamma_table(rng) -> Tuple[float, float, str]:
    worst = 0.0
    for looks in (1, 2, 5, 10, 100):
        worst = max(worst, abs(losses.gamma_series_coefficient(looks, 1)))
        for k in range(2, 8):
            b = losses.gamma_series_coefficient(looks, k)
            if not 0.0 < b < 1.0:
                worst = max(worst, 1.0)
    return worst, 0.0, 'b(l,1)=0 and 0<b(l,k)<1'


def check_gaussian_nll_is_mse(rng) -> Tuple[float, float, str]:
    model = NoiseModel.gaussian(0.2)
    y = sample_noisy(model, rng.uniform(0.1, 0.9, size=(6, 6)), rng)
    pair = split(model, y, 0.5, rng)
    f = Estimator.affine(0.7, 0.1)
    return abs(losses.gr2r_nll(model, f, pair).value - losses.gr2r_mse(f, pair).value), 0.0, ''


# -- additive matching -------------------------------------------------------

def check_maxent_rule(rng) -> Tuple[float, float, str]:
    n = int(setting('verify', 'maxent_samples', 100000))
    noise = am.log_rayleigh_sample(0.1, n, rng)
    spec = am.target_moments(noise, 3, 1.0)
    omega = am.maxent_sample(spec, n, am.GdConfig.from_settings(), rng)
    residuals = am.moment_residuals(omega, spec)
    return max(residuals.values()), float(setting('moments', 'rel_tol', 0.1)), 'k=3, tau=1'


def check_error_terms(rng) -> Tuple[float, float, str]:
    n = _mc_draws()
    noise = am.log_rayleigh_sample(0.1, n, rng)
    spec = am.target_moments(noise, 3, 1.0)
    omega = am.maxent_sample(spec, n, am.GdConfig(rel_tol=1e-4), rng)
    worst = 0.0
    for k in (1, 2):
        terms = am.error_term(noise, omega, 1.0, k)
        half_width = 4.0 * float(np.std(terms, ddof=1)) / np.sqrt(n)
        worst = max(worst, abs(float(np.mean(terms))) / half_width)
    return worst, 1.0, 'residual in units of the 4-SE half width'


def check_additive_recombination(rng) -> Tuple[float, float, str]:
    y = rng.uniform(0.1, 0.9, size=64)
    omega = rng.standard_normal(64)
    worst = 0.0
    for tau in (0.5, 1.0, 2.0):
        pair = am.r2r_additive_split(y, omega, tau)
        worst = max(worst, float(np.max(np.abs(pair.recombine() - y))))
    return worst, 1e-12, ''


# -- oracles and inverse problems ---------------------------------------------

def check_enumeration_mass(rng) -> Tuple[float, float, str]:
    worst = 0.0
    for model, x, alpha in _discrete_cases():
        grid = enumerate_split_law(model, x, alpha, tail_eps=1e-12)
        worst = max(worst, abs(grid.total_mass + grid.tail_mass_dropped - 1.0))
    return worst, 1e-10, ''


def check_grid_weights_x_free(rng) -> Tuple[float, float, str]:
    worst = 0.0
    for model, alpha, (x_a, x_b) in X_PAIRS:
        grids = []
        for x in (x_a, x_b):
            atoms = enumerate_split_law(model, x, alpha, tail_eps=1e-12).atoms
            grids.append(atoms.assign(key=atoms['y'].round(KEY_DECIMALS)))
        joined = grids[0].merge(grids[1], on=['key', 'omega'], suffixes=('_a', '_b'))
        if joined.empty:
            return float('inf'), 0.0, f"no shared atoms for {model}"
        worst = max(worst, float(np.max(np.abs(joined['cond_weight_a'] - joined['cond_weight_b']))))
    return worst, 0.0, f"{len(X_PAIRS)} pairs of x"


def check_enumeration_marginals(rng) -> Tuple[float, float, str]:
    worst = 0.0
    for model, x, alpha in _discrete_cases():
        marginal = enumerate_split_law(model, x, alpha, tail_eps=1e-12).marginal('y')
        keys = marginal.index.to_numpy()
        if model.family == POISSON:
            pmf = poisson.pmf(np.rint(keys / model.gamma_gain), x / model.gamma_gain)
        else:
            pmf = binom.pmf(np.rint(keys * model.looks), model.looks, x)
        worst = max(worst, float(np.max(np.abs(marginal.to_numpy() - pmf))))
    return worst, 1e-14, 'marginal of y against the family pmf'


def check_ci_brackets_exact(rng) -> Tuple[float, float, str]:
    seed = int(rng.integers(2 ** 31))
    worst = 0.0
    for model, x, alpha in ((NoiseModel.poisson(1.0), 2.0, 0.5), (NoiseModel.binomial(10), 0.3, 0.5)):
        grid = enumerate_split_law(model, x, alpha, tail_eps=1e-14)
        exact = expected_functional(grid, lambda atoms: atoms['y1'].to_numpy() ** 2)

        def draw(r, n, model=model, x=x, alpha=alpha):
            return split(model, sample_noisy(model, np.full(n, x), r), alpha, r).y1

        ci = ci_expectation(draw, np.square, _mc_draws(), seed)
        worst = max(worst, abs(ci.mean - exact) / ci.half_width)
    return worst, 1.0, 'E[y1^2] against enumeration, residual in 4-SE units'


def check_adjoint(rng) -> Tuple[float, float, str]:
    shape = (8, 8)
    ops = [iops.ForwardOperator.identity(shape),
           iops.make_bernoulli_mask(shape, 0.9, int(rng.integers(2 ** 31))),
           iops.ForwardOperator.from_matrix(rng.standard_normal((20, 64)), shape, (20,))]
    worst = 0.0
    for A in ops:
        x = rng.standard_normal(A.input_shape)
        y = rng.standard_normal(A.output_shape)
        worst = max(worst, abs(float(np.sum(A.apply(x) * y)) - float(np.sum(x * A.adjoint(y)))))
    return worst, 1e-10, ''


def check_mask_idempotent(rng) -> Tuple[float, float, str]:
    A = iops.make_bernoulli_mask((8, 8), 0.9, int(rng.integers(2 ** 31)))
    x = rng.standard_normal((8, 8))
    return float(np.max(np.abs(A.apply(A.apply(x)) - A.apply(x)))), 0.0, ''


def check_transform_bijection(rng) -> Tuple[float, float, str]:
    x = rng.standard_normal((6, 6))
    group = iops.TransformGroup.from_names(['shifts', 'rotations', 'flips'], max_shift=2)
    worst = 0.0
    for g in group.elements:
        worst = max(worst, float(np.max(np.abs(g.inverse().apply(g.apply(x)) - x))))
    return worst, 0.0, f"{len(group)} transforms"


def check_operator_loss(rng) -> Tuple[float, float, str]:
    model = NoiseModel.gaussian(0.1)
    shape = (8, 8)
    x = rng.uniform(0.1, 0.9, size=shape)
    f = Estimator.affine(0.9, 0.05)

    A_id = iops.ForwardOperator.identity(shape)
    pair = split(model, sample_noisy(model, x, rng), 0.5, rng)
    identity_gap = abs(losses.gr2r_operator_mse(A_id, f, pair).value - losses.gr2r_mse(f, pair).value)

    A = iops.make_bernoulli_mask(shape, 0.9, int(rng.integers(2 ** 31)))
    y = A.apply(sample_noisy(model, x, rng))
    masked = iops.split_observed(model, A, y, 0.5, rng)
    dense = A.dense()
    reference = float(np.sum((dense @ f(masked.y1).ravel() - masked.y2.ravel()) ** 2))
    dense_gap = abs(losses.gr2r_operator_mse(A, f, masked).value - reference)
    return max(identity_gap, dense_gap), 1e-10, ''


def check_ei_fixed_points(rng) -> Tuple[float, float, str]:
    shape = (6, 6)
    A = iops.ForwardOperator.identity(shape)
    f = Estimator.identity()
    x = rng.standard_normal(shape)
    symmetric = x + np.rot90(x) + np.rot90(x, 2) + np.rot90(x, 3)
    single = iops.TransformGroup([iops.Transform(iops.ROTATE, quarter_turns=1)])
    values = [losses.ei_loss(A, f, x, iops.TransformGroup([iops.Transform.identity()])).value,
              losses.ei_loss(A, f, symmetric, single).value]
    return max(values), 0.0, ''


CHECKS: List[Tuple[str, str, Callable]] = [
    ('split-moments-exact', 'splitters', check_split_moments),
    ('split-moments-continuous', 'splitters', check_split_moments_continuous),
    ('split-recombination', 'splitters', check_recombination),
    ('enumeration-mass', 'oracles', check_enumeration_mass),
    ('enumeration-marginals', 'oracles', check_enumeration_marginals),
    ('grid-weights-x-free', 'oracles', check_grid_weights_x_free),
    ('ci-brackets-exact', 'oracles', check_ci_brackets_exact),
    ('unbiasedness-mse', 'losses', check_unbiasedness_mse),
    ('unbiasedness-nll', 'losses', check_unbiasedness_nll),
    ('nll-minimizer-posterior-mean', 'losses', check_nll_minimizer),
    ('sure-limit-gaussian', 'losses', check_sure_limit_gaussian),
    ('sure-limit-poisson', 'losses', check_poisson_limit),
    ('gamma-beta-recursion', 'losses', check_gamma_recursion),
    ('gamma-series-limit', 'losses', check_gamma_series_limit),
    ('gamma-series-table', 'losses', check_gamma_table),
    ('gaussian-nll-equals-mse', 'losses', check_gaussian_nll_is_mse),
    ('maxent-stopping-rule', 'additive_matching', check_maxent_rule),
    ('moment-error-terms', 'additive_matching', check_error_terms),
    ('additive-recombination', 'additive_matching', check_additive_recombination),
    ('operator-adjoint', 'inverse_ops', check_adjoint),
    ('mask-idempotent', 'inverse_ops', check_mask_idempotent),
    ('transform-bijection', 'inverse_ops', check_transform_bijection),
    ('operator-loss-reference', 'inverse_ops', check_operator_loss),
    ('ei-fixed-points', 'inverse_ops', check_ei_fixed_points),
]


def _run_one(seed: int, index: int, check_id: str, module: str, fn: Callable) -> CheckResult:
    rng = np.random.default_rng([seed, index])
    try:
        residual, tolerance, detail = fn(rng)
        result = _result(check_id, module, residual, tolerance, detail)
    except Exception as e:
        logger.error(f"❌ {check_id} raised {type(e).__name__}: {e}")
        result = CheckResult(check_id, module, ERROR, None, None, f"{type(e).__name__}: {e}")
    marker = '✅' if result.status == PASS else '❌'
    logger.info(f"{marker} {check_id}: residual {result.residual} (tol {result.tolerance})")
    return result


def run_checks(seed: int, only: Optional[List[str]] = None, jobs: int = 1) -> List[CheckResult]:
    """
    Run the suite in CHECKS order. With jobs > 1 checks run on a thread pool;
    each check owns its Generator, so results do not depend on jobs.
    """
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    selected = [(index, check_id, module, fn) for index, (check_id, module, fn) in enumerate(CHECKS)
                if not only or check_id in only]
    if jobs == 1:
        return [_run_one(seed, *task) for task in selected]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda task: _run_one(seed, *task), selected))


def build_report(seed: int, results: List[CheckResult]) -> dict:
    return {
        'seed': seed,
        'passed': all(r.status == PASS for r in results),
        'checks': [asdict(r) for r in results],
        'coverage': {r.check_id: r.status for r in results},
    }
