"""Encoder, generator and discriminator networks and their compositions.

Domain A is the image family produced by ``G_A`` and domain B the one produced
by ``G_B``.  A Successor ``S_A = G_A . E_A`` maps a B-domain image to the A
domain (so ``E_A`` reads B images), and the Coordinators chain both
Successors into round trips::

    C_A(b) = S_B(S_A(b))        C_B(a) = S_A(S_B(a))

The Successors hold references to the Pioneer generators, never copies.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn

from .errors import ValidationError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 64
    latent_dim: int = 100
    base_channels: int = 64
    # stride-2 blocks; None means downsample to 4x4
    n_blocks: Optional[int] = None
    kernel_size: int = 5
    leaky_slope: float = 0.2
    dropout: float = 0.3
    bias: bool = True

    def __post_init__(self):
        if self.image_size < 1:
            raise ValidationError("image_size", f"must be >= 1, got {self.image_size}")
        if self.latent_dim < 1:
            raise ValidationError("latent_dim", f"must be >= 1, got {self.latent_dim}")
        if self.base_channels < 1:
            raise ValidationError("base_channels", f"must be >= 1, got {self.base_channels}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout", f"must lie in [0, 1), got {self.dropout}")
        if self.kernel_size % 2 != 1:
            raise ValidationError("kernel_size", "must be odd")
        blocks = self.blocks
        if blocks < 1 or self.image_size % (2 ** blocks):
            raise ValidationError(
                "n_blocks",
                f"image_size {self.image_size} is not divisible by 2**{blocks}",
            )

    @property
    def blocks(self) -> int:
        if self.n_blocks is not None:
            return self.n_blocks
        return max(1, int(round(math.log2(self.image_size / 4))))

    @property
    def bottom_size(self) -> int:
        return self.image_size // 2 ** self.blocks

    def channels(self, i: int) -> int:
        return self.base_channels * 2 ** i

    def to_dict(self) -> dict:
        return asdict(self)


def _down_stack(cfg: NetworkConfig, first_bn: bool) -> nn.Sequential:
    layers = []
    pad = cfg.kernel_size // 2
    for i in range(cfg.blocks):
        cin = 1 if i == 0 else cfg.channels(i - 1)
        cout = cfg.channels(i)
        layers.append(nn.Conv2d(cin, cout, cfg.kernel_size, stride=2, padding=pad, bias=cfg.bias))
        if i > 0 or first_bn:
            layers.append(nn.BatchNorm2d(cout))
        layers.append(nn.LeakyReLU(cfg.leaky_slope))
        if cfg.dropout > 0:
            layers.append(nn.Dropout(cfg.dropout))
    layers.append(nn.Flatten())
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    """Image (N, 1, H, W) -> latent (N, latent_dim)."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.latent_dim = cfg.latent_dim
        self.features = _down_stack(cfg, first_bn=True)
        flat = cfg.channels(cfg.blocks - 1) * cfg.bottom_size ** 2
        self.head = nn.Linear(flat, cfg.latent_dim, bias=cfg.bias)

    def forward(self, x):
        return self.head(self.features(x))


class Generator(nn.Module):
    """Latent (N, latent_dim) -> image (N, 1, H, W) with tanh output."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.latent_dim = cfg.latent_dim
        top = cfg.channels(cfg.blocks - 1)
        s = cfg.bottom_size
        pad = cfg.kernel_size // 2
        self.project = nn.Sequential(
            nn.Linear(cfg.latent_dim, top * s * s, bias=cfg.bias),
            nn.Unflatten(1, (top, s, s)),
            nn.BatchNorm2d(top),
            nn.LeakyReLU(cfg.leaky_slope),
        )
        layers = []
        for i in reversed(range(1, cfg.blocks)):
            cin, cout = cfg.channels(i), cfg.channels(i - 1)
            layers += [
                nn.ConvTranspose2d(cin, cout, cfg.kernel_size, stride=2, padding=pad,
                                   output_padding=1, bias=cfg.bias),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(cfg.leaky_slope),
            ]
        layers += [
            nn.ConvTranspose2d(cfg.channels(0), 1, cfg.kernel_size, stride=2, padding=pad,
                               output_padding=1, bias=cfg.bias),
            nn.Tanh(),
        ]
        self.upsample = nn.Sequential(*layers)

    def forward(self, z):
        return self.upsample(self.project(z))


class Discriminator(nn.Module):
    """Image (N, 1, H, W) -> probability (N,) of being an observed image."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.features = _down_stack(cfg, first_bn=False)
        flat = cfg.channels(cfg.blocks - 1) * cfg.bottom_size ** 2
        self.head = nn.Linear(flat, 1, bias=cfg.bias)

    def forward(self, x):
        p = torch.sigmoid(self.head(self.features(x))).squeeze(1)
        # float32 sigmoid rounds to exactly 0/1 for large logits
        return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def init_weights(module: nn.Module) -> None:
    """DCGAN-style initialisation: N(0, 0.02) weights, N(1, 0.02) BN scales."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


class ModelBundle(nn.Module):
    """The six networks.  Pioneers are (G_A, D_A) and (G_B, D_B)."""

    NAMES = ("E_A", "E_B", "G_A", "G_B", "D_A", "D_B")

    def __init__(self, E_A, E_B, G_A, G_B, D_A, D_B, config: Optional[NetworkConfig] = None):
        super().__init__()
        self.E_A, self.E_B = E_A, E_B
        self.G_A, self.G_B = G_A, G_B
        self.D_A, self.D_B = D_A, D_B
        self.config = config

    @classmethod
    def build(cls, cfg: NetworkConfig, seed: int = 0, dtype=torch.float32) -> "ModelBundle":
        gen = torch.Generator().manual_seed(seed)
        with _fork_rng(gen):
            bundle = cls(Encoder(cfg), Encoder(cfg), Generator(cfg), Generator(cfg),
                         Discriminator(cfg), Discriminator(cfg), config=cfg)
            bundle.apply(init_weights)
        return bundle.to(dtype)

    def S_A(self, b):
        return successor_forward(self.E_A, self.G_A, b)

    def S_B(self, a):
        return successor_forward(self.E_B, self.G_B, a)

    def C_A(self, b):
        return coordinator_forward(self, b, "A")

    def C_B(self, a):
        return coordinator_forward(self, a, "B")

    def encoders(self):
        return [self.E_A, self.E_B]

    def generators(self):
        return [self.G_A, self.G_B]

    def discriminators(self):
        return [self.D_A, self.D_B]


@contextlib.contextmanager
def _fork_rng(gen: torch.Generator):
    with torch.random.fork_rng(devices=[]):
        torch.set_rng_state(gen.get_state())
        yield


@contextlib.contextmanager
def inference_mode(module: nn.Module):
    """Eval mode + no_grad; restores the previous train/eval flags on exit."""
    flags = [(m, m.training) for m in module.modules()]
    module.eval()
    try:
        with torch.no_grad():
            yield module
    finally:
        for m, was_training in flags:
            m.train(was_training)


def module_dtype(module: nn.Module) -> torch.dtype:
    for t in module.parameters():
        return t.dtype
    return torch.get_default_dtype()


def sample_prior(n: int, latent_dim: int, generator: Optional[torch.Generator] = None,
                 dtype=torch.float32) -> torch.Tensor:
    """Uniform prior on [-1, 1]^latent_dim."""
    u = torch.rand(n, latent_dim, generator=generator, dtype=dtype)
    return u * 2.0 - 1.0


def _check_image(net, img, field="img"):
    if not isinstance(img, torch.Tensor):
        raise ValidationError(field, f"expected a torch.Tensor, got {type(img).__name__}")
    size = net.image_size
    expected = (1, size, size)
    if img.dim() != 4 or tuple(img.shape[1:]) != expected:
        raise ValidationError(field, f"expected shape (N, {1}, {size}, {size}), got {tuple(img.shape)}")


def encode(E: nn.Module, img: torch.Tensor) -> torch.Tensor:
    _check_image(E, img)
    return E(img)


def generate(G: nn.Module, z: torch.Tensor) -> torch.Tensor:
    if not isinstance(z, torch.Tensor) or z.dim() != 2 or z.shape[1] != G.latent_dim:
        shape = tuple(z.shape) if isinstance(z, torch.Tensor) else type(z).__name__
        raise ValidationError("z", f"expected shape (N, {G.latent_dim}), got {shape}")
    if not torch.isfinite(z).all():
        raise ValidationError("z", "latent vector contains non-finite values")
    return G(z)


def discriminate(D: nn.Module, img: torch.Tensor) -> torch.Tensor:
    _check_image(D, img)
    return D(img)


def successor_forward(E: nn.Module, G: nn.Module, img: torch.Tensor) -> torch.Tensor:
    return generate(G, encode(E, img))


def coordinator_forward(bundle: ModelBundle, img: torch.Tensor, direction: str) -> torch.Tensor:
    """Round trip through both Successors.

    ``direction="A"`` expects a B-domain image and returns ``S_B(S_A(img))``;
    ``direction="B"`` expects an A-domain image and returns ``S_A(S_B(img))``.
    """
    if direction == "A":
        return bundle.S_B(bundle.S_A(img))
    if direction == "B":
        return bundle.S_A(bundle.S_B(img))
    raise ValidationError("direction", f"must be 'A' or 'B', got {direction!r}")
