import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "hctc", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("hctc")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_log_posterior(rng, K, T, scale=2.0):
    """``K x T`` log-posterior with columns normalized to machine precision."""
    from hctc.numerics import log_softmax

    return log_softmax(scale * rng.normal(size=(T, K))).T.copy()
