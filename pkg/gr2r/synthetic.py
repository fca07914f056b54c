"""Synthetic clean images: random piecewise-constant blocks plus a smooth gradient."""

import logging
from typing import Optional

import numpy as np

from gr2r.exceptions import ConfigError
from gr2r.settings import setting

logger = logging.getLogger(__name__)


def synthetic_image(rng: np.random.Generator, height: Optional[int] = None,
                    width: Optional[int] = None) -> np.ndarray:
    """One image with values in [low, high] from the synthetic settings."""
    height = int(height or setting('synthetic', 'height', 32))
    width = int(width or setting('synthetic', 'width', 32))
    low = float(setting('synthetic', 'low', 0.1))
    high = float(setting('synthetic', 'high', 0.9))
    n_blocks = int(setting('synthetic', 'n_blocks', 6))
    if height < 1 or width < 1:
        raise ConfigError(f"Image size must be positive, got {height}x{width}")

    image = np.zeros((height, width))
    for _ in range(n_blocks):
        top, left = rng.integers(0, height), rng.integers(0, width)
        bottom = rng.integers(top + 1, height + 1)
        right = rng.integers(left + 1, width + 1)
        image[top:bottom, left:right] = rng.uniform(-1.0, 1.0)

    rows = np.linspace(0.0, 1.0, height)[:, None]
    cols = np.linspace(0.0, 1.0, width)[None, :]
    angle = rng.uniform(0.0, 2.0 * np.pi)
    image = image + np.cos(angle) * rows + np.sin(angle) * cols

    span = image.max() - image.min()
    unit = (image - image.min()) / span if span > 0 else np.full_like(image, 0.5)
    return low + (high - low) * unit


def synthetic_dataset(n: int, seed: int, height: Optional[int] = None,
                      width: Optional[int] = None) -> np.ndarray:
    """Stack of n images; image k uses the k-th spawned substream of seed."""
    streams = np.random.default_rng(seed).spawn(int(n))
    images = np.stack([synthetic_image(s, height, width) for s in streams])
    logger.debug(f"Generated {n} synthetic images of shape {images.shape[1:]}")
    return images
