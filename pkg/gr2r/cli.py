#!/usr/bin/env python3
"""
Command-line entry point.

    python -m gr2r corrupt      --config run.json --input clean.pfm --output noisy.pfm
    python -m gr2r split        --config run.json --input noisy.pfm
    python -m gr2r verify       [--config run.json]
    python -m gr2r train        --config run.json
    python -m gr2r evaluate     --config run.json --estimator runs/estimator.json
    python -m gr2r sweep-alpha  --config run.json
    python -m gr2r moments      [--config run.json] [--input noise.npy]
    python -m gr2r inpaint      --config run.json

Exit codes: 0 success, 2 config/domain error, 3 verification failure,
4 divergence.
"""

import argparse
import glob
import logging
import math
import os
import sys
import time
from typing import List, Optional, Tuple

import numpy as np
from tabulate import tabulate

from gr2r import additive_matching as am
from gr2r import inverse_ops as iops
from gr2r.estimators import (
    AFFINE, CONSTANT, CONVOLUTION, FINITE_DIFFERENCE, IDENTITY, POLYNOMIAL,
    Estimator, TrainConfig, TrainingData, train,
)
from gr2r.exceptions import (
    ConfigError, ConvergenceError, DivergenceError, DomainError, ShapeError, UnsupportedFamilyError,
)
from gr2r.io_formats import (
    MetricsRecord, RunConfig, append_metrics, load_run_config, psnr,
    read_image, write_image, write_json, write_sweep_csv,
)
from gr2r.losses import make_loss_builder
from gr2r.nef_models import NoiseModel, sample_noisy
from gr2r.settings import BASE_DIR, setup_logging
from gr2r.splitters import default_alpha, default_mc_samples, mc_inference, split
from gr2r.synthetic import synthetic_dataset
from gr2r.verification import build_report, run_checks

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_DIVERGENCE = 4

DEFAULT_OUT = os.path.join(BASE_DIR, 'runs')

# Named substreams of the run seed
STREAMS = {'data': 0, 'noise': 1, 'train': 2, 'eval': 3, 'mask': 4, 'moments': 5, 'split': 6}

SELF_SUPERVISED = ('gr2r_mse', 'gr2r_nll', 'gr2r_operator_mse')


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name], index])


# -- shared helpers ------------------------------------------------------------

def resolve_seed(args, cfg: Optional[RunConfig]) -> int:
    if args.seed is not None:
        return int(args.seed)
    return cfg.seed if cfg is not None else 0


def run_alpha(cfg: RunConfig, model: NoiseModel) -> float:
    return cfg.alpha if cfg.alpha is not None else default_alpha(model)


def run_j(cfg: RunConfig, model: NoiseModel) -> int:
    return cfg.J if cfg.J is not None else default_mc_samples(model.family)


def load_clean_images(cfg: RunConfig, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """(train, test) stacks of clean images."""
    ds = cfg.dataset
    if ds.kind == 'synthetic':
        train_seed, test_seed = stream(seed, 'data').integers(2 ** 31, size=2)
        train_x = synthetic_dataset(ds.n_train, int(train_seed), ds.height, ds.width)
        test_x = synthetic_dataset(ds.n_test, int(test_seed), ds.height, ds.width)
        return train_x, test_x
    if not ds.clean_glob:
        raise ConfigError("dataset.clean_glob is required for file datasets")
    paths = sorted(glob.glob(ds.clean_glob))
    if len(paths) < ds.n_train + ds.n_test:
        raise ConfigError(f"Need {ds.n_train + ds.n_test} images, found {len(paths)} for {ds.clean_glob}")
    images = np.stack([read_image(p) for p in paths[:ds.n_train + ds.n_test]])
    return images[:ds.n_train], images[ds.n_train:]


def build_estimator(cfg: RunConfig, shape: Tuple[int, ...]) -> Estimator:
    spec = cfg.estimator
    if spec.kind == IDENTITY:
        return Estimator.identity(spec.range_map)
    if spec.kind == CONSTANT:
        return Estimator.constant(np.full(shape, 0.5) if spec.per_pixel else 0.5, spec.range_map)
    if spec.kind == AFFINE:
        if spec.per_pixel:
            return Estimator.affine(np.ones(shape), np.zeros(shape), spec.range_map)
        return Estimator.affine(1.0, 0.0, spec.range_map)
    if spec.kind == POLYNOMIAL:
        coeffs = np.zeros(spec.degree + 1)
        coeffs[1] = 1.0
        return Estimator.polynomial(coeffs, spec.range_map)
    if spec.kind == CONVOLUTION:
        kernel = np.zeros((spec.kernel_size, spec.kernel_size))
        kernel[spec.kernel_size // 2, spec.kernel_size // 2] = 1.0
        return Estimator.convolution(kernel, spec.range_map)
    raise ConfigError(f"Unknown estimator kind '{spec.kind}'")


def train_config(cfg: RunConfig, seed: int, gradient_mode: Optional[str] = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(step_size=t.step_size, epochs=t.epochs, batch_size=t.batch_size,
                       seed=int(stream(seed, 'train').integers(2 ** 31)),
                       gradient_mode=gradient_mode or t.gradient_mode)


def corrupt_stack(model: NoiseModel, images: np.ndarray, seed: int, name: str = 'noise') -> np.ndarray:
    return np.stack([sample_noisy(model, x, stream(seed, name, k)) for k, x in enumerate(images)])


def evaluate_estimator(f: Estimator, cfg: RunConfig, model: NoiseModel, test_x: np.ndarray,
                       seed: int, alpha: float, jobs: int) -> float:
    """Mean PSNR over the test set; self-supervised losses use Monte-Carlo inference."""
    J = run_j(cfg, model)
    values = []
    for k, x in enumerate(test_x):
        y = sample_noisy(model, x, stream(seed, 'eval', 2 * k))
        if cfg.loss in SELF_SUPERVISED:
            x_hat = mc_inference(f, model, y, alpha, J, stream(seed, 'eval', 2 * k + 1), jobs)
        else:
            x_hat = f(y)
        values.append(psnr(x_hat, x))
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf


def run_training(cfg: RunConfig, model: NoiseModel, alpha: float, seed: int,
                 history: List[float]) -> Tuple[Estimator, np.ndarray]:
    train_x, test_x = load_clean_images(cfg, seed)
    train_y = corrupt_stack(model, train_x, seed)
    f = build_estimator(cfg, train_x.shape[1:])
    builder = make_loss_builder(cfg.loss, model, alpha)
    gradient_mode = FINITE_DIFFERENCE if cfg.loss == 'sure' else None
    trained = train(f, builder, TrainingData(train_y, train_x), train_config(cfg, seed, gradient_mode),
                    history=history)
    return trained, test_x


def metrics_path(out_dir: str) -> str:
    return os.path.join(out_dir, 'metrics.jsonl')


def _print_table(rows, headers):
    print(tabulate(rows, headers=headers, tablefmt='grid', floatfmt='.6g'))


# -- commands ----------------------------------------------------------------

def cmd_corrupt(args, cfg: RunConfig, seed: int) -> int:
    model = cfg.noise_model()
    if args.input:
        x = read_image(args.input)
    else:
        data_seed = int(stream(seed, 'data').integers(2 ** 31))
        x = synthetic_dataset(1, data_seed, cfg.dataset.height, cfg.dataset.width)[0]
    y = sample_noisy(model, x, stream(seed, 'noise'))
    output = args.output or os.path.join(args.out, 'noisy.pfm')
    os.makedirs(os.path.dirname(os.path.abspath(output)), exist_ok=True)
    write_image(output, y)
    write_json(os.path.join(args.out, 'corrupt.json'),
               {'seed': seed, 'model': model.to_dict(), 'input': args.input, 'output': output})
    logger.info(f"✅ Wrote {model} corruption of {x.shape} image to {output}")
    return EXIT_OK


def cmd_split(args, cfg: RunConfig, seed: int) -> int:
    model = cfg.noise_model()
    if not args.input:
        raise ConfigError("split needs --input")
    y = read_image(args.input)
    alpha = run_alpha(cfg, model)
    pair = split(model, y, alpha, stream(seed, 'split'))
    os.makedirs(args.out, exist_ok=True)
    write_image(os.path.join(args.out, 'y1.pfm'), pair.y1)
    write_image(os.path.join(args.out, 'y2.pfm'), pair.y2)
    logger.info(f"✅ Split {args.input} with alpha={alpha} into {args.out}")
    return EXIT_OK


def cmd_verify(args, cfg: Optional[RunConfig], seed: int) -> int:
    # a run config only contributes its seed; the oracle cases are fixed
    results = run_checks(seed, jobs=args.jobs)
    report = build_report(seed, results)
    report_path = os.path.join(args.out, 'verify_report.json')
    write_json(report_path, report)
    _print_table([(r.check_id, r.module, r.status, r.residual, r.tolerance) for r in results],
                 ['check', 'module', 'status', 'residual', 'tolerance'])
    if report['passed']:
        logger.info(f"✅ All {len(results)} checks passed; report at {report_path}")
        return EXIT_OK
    failed = [r.check_id for r in results if r.status != 'pass']
    logger.error(f"❌ {len(failed)} checks failed: {failed}")
    return EXIT_VERIFY


def cmd_train(args, cfg: RunConfig, seed: int) -> int:
    model = cfg.noise_model()
    alpha = run_alpha(cfg, model)
    started = time.perf_counter()
    history: List[float] = []
    f, test_x = run_training(cfg, model, alpha, seed, history)
    score = evaluate_estimator(f, cfg, model, test_x, seed, alpha, args.jobs)

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, 'estimator.json'), 'w') as fh:
        fh.write(f.to_json() + '\n')
    wall_ms = (time.perf_counter() - started) * 1000.0 if cfg.record_timing else None
    append_metrics(metrics_path(args.out), MetricsRecord(
        run_id=f"train-{cfg.loss}-seed{seed}", loss_name=cfg.loss, alpha=alpha,
        psnr_db='inf' if math.isinf(score) else score, loss_curve=history, seed=seed, wall_ms=wall_ms))
    logger.info(f"✅ Trained {f.kind} estimator with {cfg.loss}: test PSNR {score:.3f} dB")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig, seed: int) -> int:
    model = cfg.noise_model()
    alpha = run_alpha(cfg, model)
    path = args.estimator or os.path.join(args.out, 'estimator.json')
    try:
        with open(path) as fh:
            f = Estimator.from_json(fh.read())
    except OSError as e:
        raise ConfigError(f"Cannot read estimator {path}: {e}") from e
    _, test_x = load_clean_images(cfg, seed)
    score = evaluate_estimator(f, cfg, model, test_x, seed, alpha, args.jobs)
    append_metrics(metrics_path(args.out), MetricsRecord(
        run_id=f"evaluate-{cfg.loss}-seed{seed}", loss_name=cfg.loss, alpha=alpha,
        psnr_db='inf' if math.isinf(score) else score, seed=seed))
    logger.info(f"✅ Test PSNR {score:.3f} dB over {len(test_x)} images")
    return EXIT_OK


def cmd_sweep_alpha(args, cfg: RunConfig, seed: int) -> int:
    model = cfg.noise_model()
    alphas = cfg.alphas or ([cfg.alpha] if cfg.alpha is not None else [default_alpha(model)])
    rows = []
    for alpha in alphas:
        try:
            f, test_x = run_training(cfg, model, alpha, seed, [])
            score = evaluate_estimator(f, cfg, model, test_x, seed, alpha, args.jobs)
            logger.info(f"✅ alpha={alpha}: {score:.3f} dB")
        except (DivergenceError, DomainError, ConfigError) as e:
            logger.warning(f"⚠️ alpha={alpha} failed: {e}")
            score = math.nan
        rows.append({'alpha': alpha, 'loss_name': cfg.loss, 'psnr_db': score, 'seed': seed})
    os.makedirs(args.out, exist_ok=True)
    write_sweep_csv(os.path.join(args.out, 'sweep.csv'), rows)
    _print_table([(r['alpha'], r['psnr_db']) for r in rows], ['alpha', 'psnr_db'])
    return EXIT_OK


def cmd_moments(args, cfg: Optional[RunConfig], seed: int) -> int:
    spec = cfg.moments if cfg is not None and cfg.moments is not None else None
    sigma = spec.sigma if spec else 0.1
    n = spec.n if spec else 100000
    k = spec.k if spec else 3
    tau = spec.tau if spec else 1.0
    source = args.input or (spec.input if spec else None)
    rng = stream(seed, 'moments')

    if source:
        noise = np.load(source).ravel()
    elif spec is None or spec.noise == 'log-rayleigh':
        noise = am.log_rayleigh_sample(sigma, n, rng)
    elif spec.noise == 'gaussian':
        noise = sigma * rng.standard_normal(n)
    else:
        raise ConfigError(f"Unknown noise generator '{spec.noise}'")

    target = am.target_moments(noise, k, tau)
    omega = am.maxent_sample(target, noise.size, am.GdConfig.from_settings(), rng)
    residuals = am.moment_residuals(omega, target)
    empirical = am.describe_moments(noise, k)
    achieved = am.describe_moments(omega, k)
    _print_table([(f"m{i}", empirical[f"m{i}"], target.moments[i - 1], achieved[f"m{i}"], residuals[i])
                  for i in range(1, k + 1)],
                 ['moment', 'noise', 'target', 'synthetic', 'residual'])
    write_json(os.path.join(args.out, 'moments.json'), {
        'seed': seed, 'tau': tau, 'alpha_equivalent': am.alpha_equivalent(tau),
        'noise': empirical, 'target': target.moments, 'synthetic': achieved,
        'residuals': {str(i): r for i, r in residuals.items()},
    })
    logger.info(f"✅ Moment matching converged: {residuals}")
    return EXIT_OK


def cmd_inpaint(args, cfg: RunConfig, seed: int) -> int:
    model = cfg.noise_model()
    alpha = run_alpha(cfg, model)
    spec = cfg.inpaint
    if spec is None:
        raise ConfigError("inpaint needs an 'inpaint' section in the run config")
    train_x, test_x = load_clean_images(cfg, seed)
    shape = train_x.shape[1:]
    if spec.p >= 1.0:
        A = iops.ForwardOperator.identity(shape)
    else:
        mask_seed = spec.mask_seed
        if mask_seed is None:
            mask_seed = int(stream(seed, 'mask').integers(2 ** 31))
        A = iops.make_bernoulli_mask(shape, spec.p, mask_seed)
    transforms = iops.TransformGroup.from_names(spec.transforms, spec.max_shift)

    train_y = A.apply(corrupt_stack(model, train_x, seed))
    f = build_estimator(cfg, shape)
    builder = make_loss_builder('gr2r_operator_mse', model, alpha, operator=A,
                                transforms=transforms, ei_weight=spec.ei_weight)
    mode = FINITE_DIFFERENCE if spec.ei_weight > 0 else None
    history: List[float] = []
    f = train(f, builder, TrainingData(train_y, train_x), train_config(cfg, seed, mode), history=history)

    scores = []
    for k, x in enumerate(test_x):
        y = A.apply(sample_noisy(model, x, stream(seed, 'eval', k)))
        scores.append(psnr(f(y), x))
    score = float(np.mean(scores))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, 'estimator.json'), 'w') as fh:
        fh.write(f.to_json() + '\n')
    write_json(os.path.join(args.out, 'operator.json'), A.to_dict())
    append_metrics(metrics_path(args.out), MetricsRecord(
        run_id=f"inpaint-seed{seed}", loss_name='gr2r_operator_mse+ei', alpha=alpha,
        psnr_db='inf' if math.isinf(score) else score, loss_curve=history, seed=seed))
    logger.info(f"✅ Inpainting ({A.observed_fraction:.3f} observed): test PSNR {score:.3f} dB")
    return EXIT_OK


COMMANDS = {
    'corrupt': (cmd_corrupt, True),
    'split': (cmd_split, True),
    'verify': (cmd_verify, False),
    'train': (cmd_train, True),
    'evaluate': (cmd_evaluate, True),
    'sweep-alpha': (cmd_sweep_alpha, True),
    'moments': (cmd_moments, False),
    'inpaint': (cmd_inpaint, True),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='gr2r', description='Noise splitting for self-supervised denoising')
    sub = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument('--config', type=str, help='Run config JSON')
        p.add_argument('--seed', type=int, help='Overrides the config seed')
        p.add_argument('--out', type=str, default=DEFAULT_OUT, help='Output directory')
        p.add_argument('--jobs', type=int, default=1, help='Worker threads for Monte-Carlo work')
        if name in ('corrupt', 'split', 'moments'):
            p.add_argument('--input', type=str, help='Input file')
        if name == 'corrupt':
            p.add_argument('--output', type=str, help='Output PFM path')
        if name == 'evaluate':
            p.add_argument('--estimator', type=str, help='Estimator JSON')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    handler, needs_config = COMMANDS[args.command]

    try:
        cfg = load_run_config(args.config) if args.config else None
        if needs_config and cfg is None:
            raise ConfigError(f"{args.command} needs --config")
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        seed = resolve_seed(args, cfg)
        logger.info(f"🚀 {args.command} (seed {seed})")
        return handler(args, cfg, seed)
    except (ConfigError, DomainError, ShapeError, UnsupportedFamilyError) as e:
        logger.error(f"❌ {e}")
        return EXIT_CONFIG
    except (DivergenceError, ConvergenceError) as e:
        logger.error(f"❌ {e}")
        return EXIT_DIVERGENCE


if __name__ == '__main__':
    sys.exit(main())
