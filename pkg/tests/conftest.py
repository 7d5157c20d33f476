import numpy as np
import pytest

from hybridckf.retina import RetinaParams, simulate_ground_truth


@pytest.fixture(scope="session")
def rk4_reference():
    """RK4 at dt=1e-4 over 10 s with default parameters."""
    return simulate_ground_truth(RetinaParams(), 1e-4, 100_001, method="rk4").p_true


@pytest.fixture(scope="session")
def clean_ds():
    return simulate_ground_truth(RetinaParams(), 0.01, 1200)


@pytest.fixture(scope="session")
def long_clean_ds():
    return simulate_ground_truth(RetinaParams(), 0.01, 10_000)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
