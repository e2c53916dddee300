import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
