import numpy as np
import pytest

from bsnet.autodiff import set_numeric_mode


@pytest.fixture(autouse=True)
def float64_mode():
    set_numeric_mode("float64")
    yield
    set_numeric_mode("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
