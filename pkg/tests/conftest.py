"""
ssbnn Test Configuration
========================

Shared fixtures. The package is imported from ``src/python`` when it is not
installed.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parent.parent / "src" / "python"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from ssbnn.data.datasets import synthetic_blobs  # noqa: E402
from ssbnn.model import NetworkArch, PriorConfig, VariationalState  # noqa: E402
from ssbnn.rng import make_stream  # noqa: E402


@pytest.fixture
def small_arch():
    return NetworkArch((2, 3, 2))


@pytest.fixture
def prior():
    return PriorConfig()


@pytest.fixture
def random_state(small_arch):
    """A generic state with every slot strictly inside its domain"""
    rng = make_stream(7, "fixture")
    shapes = small_arch.weight_shapes
    return VariationalState([0.8 * rng.standard_normal(s) for s in shapes],
                            [rng.uniform(-2.0, 0.5, s) for s in shapes],
                            [rng.standard_normal(s) for s in shapes])


@pytest.fixture
def blobs():
    return synthetic_blobs(200, seed=0)


@pytest.fixture
def separating_state():
    """Dense 2 -> 2 network that puts class 1 where x1 + x2 > 1"""
    mu = [np.array([[5.0, -5.0], [-5.0, 5.0], [-5.0, 5.0]])]
    sigma = [np.full((3, 2), 1e-12)]
    return VariationalState.frozen_dense(mu, sigma)
