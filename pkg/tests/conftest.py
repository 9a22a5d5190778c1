import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fsrlab.tensor import get_tape

settings.register_profile("fsrlab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fsrlab")


@pytest.fixture(autouse=True)
def clean_tape():
    get_tape().clear()
    yield
    get_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
