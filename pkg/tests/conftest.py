import numpy as np
import pytest
import torch
from torch import nn

from banis.networks import ModelBundle, NetworkConfig


class FlattenEncoder(nn.Module):
    """Image (N, 1, s, s) -> (N, s*s), optionally scaled."""

    def __init__(self, size, scale=1.0):
        super().__init__()
        self.image_size = size
        self.latent_dim = size * size
        self.scale = scale

    def forward(self, x):
        return self.scale * x.flatten(1)


class ReshapeGenerator(nn.Module):
    """Latent (N, s*s) -> (N, 1, s, s), optionally scaled."""

    def __init__(self, size, scale=1.0):
        super().__init__()
        self.image_size = size
        self.latent_dim = size * size
        self.scale = scale

    def forward(self, z):
        return self.scale * z.view(-1, 1, self.image_size, self.image_size)


class ConstantGenerator(nn.Module):
    def __init__(self, size, value, latent_dim=None):
        super().__init__()
        self.image_size = size
        self.latent_dim = latent_dim or size * size
        v = torch.as_tensor(value, dtype=torch.float32).expand(1, 1, size, size).clone()
        self.register_buffer("value", v)

    def forward(self, z):
        return self.value.expand(z.shape[0], -1, -1, -1)


class ConstantDiscriminator(nn.Module):
    def __init__(self, size, p=0.5):
        super().__init__()
        self.image_size = size
        self.p = p

    def forward(self, x):
        return torch.full((x.shape[0],), self.p)


def identity_bundle(size, sign_a=1.0, sign_b=1.0):
    """Successors S_A = sign_a * identity, S_B = sign_b * identity."""
    return ModelBundle(FlattenEncoder(size), FlattenEncoder(size),
                       ReshapeGenerator(size, sign_a), ReshapeGenerator(size, sign_b),
                       ConstantDiscriminator(size), ConstantDiscriminator(size))


# acceptance verdict lines, echoed after the run even when output is captured
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


MINI = NetworkConfig(image_size=8, latent_dim=4, base_channels=2, n_blocks=2, dropout=0.0)


@pytest.fixture
def mini_bundle():
    return ModelBundle.build(MINI, seed=3, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
