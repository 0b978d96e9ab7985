import os

import numpy as np
import pytest
from hypothesis import settings

from koopman_microgrid import harness
from koopman_microgrid.config import builtin_config

# reproducible examples by default; HYPOTHESIS_PROFILE=explore draws fresh ones
settings.register_profile("ci", derandomize=True)
settings.register_profile("explore", derandomize=False)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture(scope="session")
def identification():
    """Default identification run, shared by every test that needs fitted predictors."""
    cfg = builtin_config("identification")
    # also fills the per-process predictor cache used by scenario runs
    return harness.run_identification(cfg)


@pytest.fixture(scope="session")
def predictors(identification):
    return identification.predictors


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
