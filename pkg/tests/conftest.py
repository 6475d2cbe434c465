import numpy as np
import pytest

from egoclust import autodiff


@pytest.fixture(autouse=True)
def strict_numerics():
    """Run every test with NaN/Inf detection on and a clean tape stack."""
    autodiff.set_debug_checks(True)
    yield
    autodiff.set_debug_checks(False)
    autodiff._tape_stack.clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
