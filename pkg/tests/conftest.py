import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)


def make_rng(tag):
    """Deterministic per-test generator so cases are reproducible."""
    return np.random.default_rng([20260814, tag])
