"""Central finite-difference gradient checking for the training losses."""

from __future__ import annotations

import numpy as np
import torch

from .losses import LossWeights, compose_eg_loss, dimg_discriminator_loss, dz_discriminator_loss
from .nets import init_params, label_block
from .trainer import CAAETrainer, TrainConfig, sample_prior

# Every network of this config has fewer than 5k parameters.
TINY_ARCH = dict(image_size=4, n_z=4, enc_channels=(4, 8), gen_channels=(8, 4), dz_hidden=(8, 4),
                 dimg_channels=(4, 4), fm_channels=(4, 4))


def numeric_grad(loss_fn, params, eps: float = 1e-6) -> list[torch.Tensor]:
    """d loss / d p for every element of every tensor in ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def analytic_grad(loss_fn, params) -> list[torch.Tensor]:
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def relative_error(a: torch.Tensor, n: torch.Tensor) -> float:
    """||a - n|| / max(||a||, ||n||) for one parameter tensor (0 when both vanish)."""
    denom = max(a.norm().item(), n.norm().item())
    return 0.0 if denom == 0 else (a - n).norm().item() / denom


def max_relative_error(loss_fn, params, eps: float = 1e-6) -> float:
    a = analytic_grad(loss_fn, params)
    n = numeric_grad(loss_fn, params, eps)
    return max(relative_error(x, y) for x, y in zip(a, n))


def tiny_problem(seed: int, gender_on=True, vgg_on=True, batch: int = 3,
                 weights: LossWeights = LossWeights(lambda_=1.0, gamma=0.5, phi=1.0)):
    """Float64 trainer plus a random batch for gradient checks."""
    cfg = TrainConfig(batch_size=batch, seed=seed, image_size=TINY_ARCH["image_size"], n_z=TINY_ARCH["n_z"],
                      weights=weights, gender_on=gender_on, vgg_on=vgg_on,
                      arch={k: v for k, v in TINY_ARCH.items() if k not in ("image_size", "n_z")})
    nets = init_params(cfg.arch_config(), seed, dtype=torch.float64)
    trainer = CAAETrainer(cfg, nets)
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand((batch, 3, 4, 4), generator=gen, dtype=torch.float64) * 2 - 1
    groups = torch.randint(0, 10, (batch,), generator=gen)
    sexes = torch.randint(0, 2, (batch,), generator=gen)
    labels = label_block(groups, sexes, trainer.arch.tile_l, trainer.arch.tile_s, torch.float64)
    prior = sample_prior(batch, trainer.arch.n_z, gen, torch.float64)
    return trainer, x, labels, prior


def check_all(seed: int, eps: float = 1e-6) -> dict:
    """Max relative error per loss for one seed (training and probability paths)."""
    trainer, x, labels, prior = tiny_problem(seed)
    nets = trainer.nets
    eg_params = [*nets.encoder.parameters(), *nets.generator.parameters()]

    def eg():
        return compose_eg_loss(trainer.eg_parts(x, labels), trainer.config.weights, trainer.config.ablation)

    def dimg():
        return trainer.dimg_loss(x, labels)

    def dz():
        return trainer.dz_loss(x, prior)

    with torch.no_grad():
        z = nets.encoder(x)
        xhat = nets.generator(torch.cat([z, labels], 1))

    def dimg_prob():
        return dimg_discriminator_loss(torch.sigmoid(nets.dimg(x, labels)), torch.sigmoid(nets.dimg(xhat, labels)))

    def dz_prob():
        return dz_discriminator_loss(torch.sigmoid(nets.dz(prior)), torch.sigmoid(nets.dz(z)))

    dimg_params = list(nets.dimg.parameters())
    dz_params = list(nets.dz.parameters())
    return {
        "eg": max_relative_error(eg, eg_params, eps),
        "dimg": max_relative_error(dimg, dimg_params, eps),
        "dz": max_relative_error(dz, dz_params, eps),
        "dimg_prob": max_relative_error(dimg_prob, dimg_params, eps),
        "dz_prob": max_relative_error(dz_prob, dz_params, eps),
    }


def param_count(module) -> int:
    return int(sum(np.prod(p.shape) for p in module.parameters()))


__all__ = ["numeric_grad", "analytic_grad", "relative_error", "max_relative_error", "tiny_problem",
           "check_all", "param_count", "TINY_ARCH"]
