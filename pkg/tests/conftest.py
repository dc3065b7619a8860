import numpy as np
import pytest
import torch

from gtl.diffusion import NoiseSchedule
from gtl.exact import random_distribution
from gtl.nets import ModelConfig, build_model


@pytest.fixture
def schedule():
    return NoiseSchedule()


@pytest.fixture
def toy_pair():
    """Random clean distributions p0 (source) and q0 (target) over N=3, L=2."""
    rng = np.random.default_rng(7)
    return random_distribution(3, 2, rng), random_distribution(3, 2, rng)


def tiny_model(kind, vocab=3, length=4, time_conditioned=False, seed=0, width=8, layers=1):
    cfg = ModelConfig(kind, vocab, length, width=width, layers=layers, heads=2, dropout=0.0,
                      time_conditioned=time_conditioned)
    model = build_model(cfg, seed=seed)
    model.eval()
    return model


class ConstRatio:
    """Ratio model returning the same log-ratio for every input."""

    def __init__(self, value=0.7):
        self.value = value

    def log_ratio(self, z, sigma=None):
        return torch.full((z.shape[0],), self.value, dtype=torch.float64)
