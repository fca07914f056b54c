import os
import sys

import numpy as np
import pytest

# Add repository root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def clean_image(rng):
    """Interior-valued 8x8 image usable as a mean for every family."""
    return rng.uniform(0.2, 0.8, size=(8, 8))


def four_se(values: np.ndarray) -> float:
    """Four standard errors of the sample mean."""
    values = np.asarray(values, dtype=np.float64)
    return 4.0 * float(np.std(values, ddof=1)) / np.sqrt(values.size)
