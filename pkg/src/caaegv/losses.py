"""Loss terms of the gender- and identity-preserving CAAE objective.

All functions accept numpy arrays or torch tensors and return a 0-d torch
tensor, so the same code serves the trainer (autograd) and plain numeric
checks. Image losses use means, not sums, so their scale does not depend on
batch or image size.

The ``*_from_logits`` variants compute the same adversarial losses from
discriminator logits through ``logsigmoid``. They are what the trainer uses:
a float32 sigmoid rounds to exactly 1.0 for logits above ~17, which the
probability-domain guards below would (correctly) reject.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import BadConfig, DomainError, ShapeMismatch

LOG_FLOOR = 1e-8


def _t(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    arr = np.asarray(x)
    return torch.as_tensor(arr, dtype=torch.float64 if arr.dtype != np.float32 else torch.float32)


def _same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_scores(scores: torch.Tensor, name: str) -> torch.Tensor:
    if scores.numel() == 0:
        raise DomainError(f"{name}: no scores")
    s = scores.detach()
    if not bool(torch.all((s > 0) & (s < 1))):
        bad = s[~((s > 0) & (s < 1))][0].item()
        raise DomainError(f"{name}: score {bad!r} outside the open interval (0, 1)")
    return scores


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(p, min=LOG_FLOOR))


def reconstruction_loss(x, xhat) -> torch.Tensor:
    x, xhat = _t(x), _t(xhat)
    _same_shape(x, xhat)
    return torch.mean((x - xhat) ** 2)


def tv_loss(x) -> torch.Tensor:
    """Squared anisotropic total variation divided by the pixel count.

    Accepts H x W x C or N x H x W x C; batches average the per-image values.
    """
    x = _t(x)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise ShapeMismatch(f"expected H x W x C or N x H x W x C, got {tuple(x.shape)}")
    dh = (x[:, 1:, :, :] - x[:, :-1, :, :]) ** 2
    dw = (x[:, :, 1:, :] - x[:, :, :-1, :]) ** 2
    pixels = x.shape[1] * x.shape[2]
    return (dh.sum(dim=(1, 2, 3)) + dw.sum(dim=(1, 2, 3))).mean() / pixels


def tv_loss_nchw(x: torch.Tensor) -> torch.Tensor:
    return tv_loss(x.permute(0, 2, 3, 1))


def dz_discriminator_loss(real_scores, fake_scores) -> torch.Tensor:
    """-mean log D(prior) - mean log(1 - D(E(x)))."""
    real = _check_scores(_t(real_scores), "real_scores")
    fake = _check_scores(_t(fake_scores), "fake_scores")
    return -_safe_log(real).mean() - _safe_log(1 - fake).mean()


def dimg_discriminator_loss(real_scores, fake_scores) -> torch.Tensor:
    """-mean log D(x, l, s) - mean log(1 - D(G(E(x), l, s), l, s))."""
    return dz_discriminator_loss(real_scores, fake_scores)


def generator_adversarial_loss(fake_scores, saturating: bool = False) -> torch.Tensor:
    """Non-saturating ``-mean log D(fake)``; ``saturating=True`` gives the
    literal minimax term ``mean log(1 - D(fake))``."""
    fake = _check_scores(_t(fake_scores), "fake_scores")
    if saturating:
        return _safe_log(1 - fake).mean()
    return -_safe_log(fake).mean()


def feature_loss(fm_x, fm_xhat) -> torch.Tensor:
    a, b = _t(fm_x), _t(fm_xhat)
    _same_shape(a, b)
    return torch.mean((a - b) ** 2)


def discriminator_loss_from_logits(real_logits, fake_logits) -> torch.Tensor:
    return -F.logsigmoid(real_logits).mean() - F.logsigmoid(-fake_logits).mean()


def generator_loss_from_logits(fake_logits, saturating: bool = False) -> torch.Tensor:
    if saturating:
        return F.logsigmoid(-fake_logits).mean()
    return -F.logsigmoid(fake_logits).mean()


# ---------------------------------------------------------------------------
# Composition


@dataclass(frozen=True)
class LossWeights:
    lambda_: float = 100.0
    gamma: float = 10.0
    phi: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise BadConfig(f"loss weight {f.name} must be finite and >= 0, got {v}")
            object.__setattr__(self, f.name, v)

    def to_dict(self) -> dict:
        return {"lambda": self.lambda_, "gamma": self.gamma, "phi": self.phi}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(lambda_=d.get("lambda", 100.0), gamma=d.get("gamma", 10.0), phi=d.get("phi", 0.01))


@dataclass(frozen=True)
class Ablation:
    gender_on: bool = True
    vgg_on: bool = True

    @property
    def name(self) -> str:
        suffix = ("G" if self.gender_on else "") + ("V" if self.vgg_on else "")
        return "CAAE-" + suffix if suffix else "CAAE"

    @classmethod
    def from_name(cls, name: str) -> "Ablation":
        if name not in ABLATIONS:
            raise BadConfig(f"unknown model variant {name!r}; expected one of {list(ABLATIONS)}")
        return ABLATIONS[name]


ABLATIONS = {
    "CAAE": Ablation(False, False),
    "CAAE-G": Ablation(True, False),
    "CAAE-V": Ablation(False, True),
    "CAAE-GV": Ablation(True, True),
}


@dataclass
class LossReport:
    """Per-step loss values. ``total`` is the encoder/generator objective."""

    recon: float = 0.0
    tv: float = 0.0
    adv_dz: float = 0.0
    adv_dimg: float = 0.0
    adv_gen_z: float = 0.0
    adv_gen_img: float = 0.0
    feat: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def compose_eg_loss(parts, weights: LossWeights, ablation: Ablation = Ablation()):
    """Weighted encoder/generator objective.

    ``parts`` is a LossReport or a mapping with the same keys; values may be
    tensors (for backprop) or floats. The feature term is dropped entirely
    when ``ablation.vgg_on`` is false.
    """
    get = parts.__getitem__ if isinstance(parts, dict) else lambda k: getattr(parts, k)
    total = weights.lambda_ * get("recon") + weights.gamma * get("tv") + get("adv_gen_z") + get("adv_gen_img")
    if ablation.vgg_on:
        total = total + weights.phi * get("feat")
    return total
