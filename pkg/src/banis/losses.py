"""Adversarial, identical and pair-matched objectives."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Optional

import torch

from .errors import ValidationError
from .networks import PROB_EPS, ModelBundle

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "stage", "adv_A", "adv_B", "id_A", "id_B", "pm_A", "pm_B", "lr_S", "lr_C")


@dataclass
class LossReport:
    step: int
    stage: str = ""
    adv_A: Optional[float] = None
    adv_B: Optional[float] = None
    id_A: Optional[float] = None
    id_B: Optional[float] = None
    pm_A: Optional[float] = None
    pm_B: Optional[float] = None
    lr_S: Optional[float] = None
    lr_C: Optional[float] = None

    def values(self):
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in ("step", "stage", "lr_S", "lr_C")}

    def is_finite(self) -> bool:
        return all(v is None or torch.isfinite(torch.tensor(v)).item() for v in self.values().values())

    def to_row(self):
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [str(self.step), self.stage] + [fmt(getattr(self, k)) for k in METRICS_HEADER[2:]]


def mse(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ValidationError("y", f"shape {tuple(y.shape)} does not match {tuple(x.shape)}")
    return ((x - y) ** 2).mean()


def _clamp_probs(p: torch.Tensor, name: str) -> torch.Tensor:
    if log.isEnabledFor(logging.DEBUG):
        n = int(((p <= PROB_EPS) | (p >= 1 - PROB_EPS)).sum())
        if n:
            log.debug("adversarial_loss: clamped %d saturated %s probabilities", n, name)
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def adversarial_loss(d_real: torch.Tensor, d_fake: torch.Tensor):
    """Return ``(d_objective, g_objective)``.

    ``d_objective = mean(log D(x)) + mean(log(1 - D(G(z))))`` is the value the
    discriminator maximises (it is <= 0).  ``g_objective = -mean(log D(G(z)))``
    is the non-saturating generator loss, to be minimised.
    """
    d_real = _clamp_probs(d_real, "real")
    d_fake = _clamp_probs(d_fake, "fake")
    d_obj = torch.log(d_real).mean() + torch.log1p(-d_fake).mean()
    return d_obj, generator_loss(d_fake)


def generator_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss ``-mean(log D(G(z)))``."""
    return -torch.log(_clamp_probs(d_fake, "fake")).mean()


def _check_paired(a, b):
    if a.shape[0] != b.shape[0]:
        raise ValidationError("b", f"batch of {b.shape[0]} B images does not pair with "
                              f"{a.shape[0]} A images")
    if a.shape[0] == 0:
        raise ValidationError("a", "empty batch")


def identical_loss(a, b, z, bundle: ModelBundle, prior_weight: float = 1.0):
    """``(id_A, id_B)`` with ``id_A = mse(S_A(b), a) + w * mse(S_A(b), G_A(z))``.

    ``prior_weight=0`` (or ``z=None``) drops the prior term.
    """
    _check_paired(a, b)
    rec_a = bundle.S_A(b)
    rec_b = bundle.S_B(a)
    id_a = mse(rec_a, a)
    id_b = mse(rec_b, b)
    if z is not None and prior_weight:
        if z.shape[0] != a.shape[0]:
            raise ValidationError("z", f"{z.shape[0]} latents for a batch of {a.shape[0]}")
        id_a = id_a + prior_weight * mse(rec_a, bundle.G_A(z))
        id_b = id_b + prior_weight * mse(rec_b, bundle.G_B(z))
    return id_a, id_b


def pair_matched_loss(a, b, bundle: ModelBundle):
    """``(pm_A, pm_B) = (mse(C_A(b), b), mse(C_B(a), a))``."""
    _check_paired(a, b)
    return mse(bundle.C_A(b), b), mse(bundle.C_B(a), a)


def autoencoder_loss(a, b, bundle: ModelBundle):
    """Plain cross-domain reconstruction: ``(mse(S_A(b), a), mse(S_B(a), b))``."""
    _check_paired(a, b)
    return mse(bundle.S_A(b), a), mse(bundle.S_B(a), b)
