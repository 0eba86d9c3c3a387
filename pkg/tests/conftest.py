import numpy as np
import pytest

from shiftcomp.harness import make_ridge_instance


@pytest.fixture(scope="session")
def ridge():
    """The synthetic sharded ridge benchmark used across the suite."""
    return make_ridge_instance()


@pytest.fixture(scope="session")
def reference(ridge):
    return ridge.solve_reference()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
