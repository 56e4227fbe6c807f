import numpy as np
import pytest

from scorelab.targets import TargetSpec

MIXTURE_DOC = {
    "form": "gaussian_mixture", "dim": 1, "alpha": 0.05, "beta": 0.05,
    "components": [{"weight": 0.5, "mean": [-2.0], "variance": 1.0},
                   {"weight": 0.5, "mean": [2.0], "variance": 1.0}],
}


def mixture_2d():
    return TargetSpec.gaussian_mixture([0.5, 0.5], [[-2.0, 0.0], [2.0, 0.0]], [1.0, 1.0],
                                       0.05, 0.05)


@pytest.fixture(scope="session")
def mixture():
    return TargetSpec.from_dict(MIXTURE_DOC)


@pytest.fixture(scope="session")
def gaussian1():
    return TargetSpec.standard_gaussian(1)


@pytest.fixture(scope="session")
def shifted():
    """Single unit-variance Gaussian with mean 2."""
    return TargetSpec.gaussian_mixture([1.0], [[2.0]], [1.0], 0.05, 0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
