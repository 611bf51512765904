import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from edgeemo.mobilenet import build_mobilenet_v2, build_small_irnet

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def reference_model():
    return build_mobilenet_v2(1.0, 7, 224, "random", seed=0)


@pytest.fixture(scope="session")
def small_model():
    return build_small_irnet(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
