"""Alternating minimax training of encoder, generator and both discriminators."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import N_GROUPS
from .exceptions import BadConfig, EmptySource, NonFiniteLoss, ShapeMismatch
from .losses import (Ablation, LossReport, LossWeights, compose_eg_loss, discriminator_loss_from_logits,
                     feature_loss, generator_loss_from_logits, reconstruction_loss, tv_loss_nchw)
from .nets import ArchConfig, CAAENetworks, init_params, label_block, save_checkpoint, to_nchw
from .validation import check_groups, check_images, check_sexes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 15
    learning_rate: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    image_size: int = 64
    n_z: int = 50
    weights: LossWeights = field(default_factory=LossWeights)
    gender_on: bool = True
    vgg_on: bool = True
    checkpoint_every: int = 0
    saturating: bool = False
    arch: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.batch_size) < 1:
            raise BadConfig("batch_size must be >= 1")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise BadConfig("learning_rate must be finite and >= 0")
        if int(self.epochs) < 0:
            raise BadConfig("epochs must be >= 0")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights.from_dict(self.weights))
        self.arch_config()

    @property
    def ablation(self) -> Ablation:
        return Ablation(bool(self.gender_on), bool(self.vgg_on))

    def arch_config(self) -> ArchConfig:
        """Architecture for this run; gender-off models get no sex inputs at all."""
        opts = dict(self.arch)
        opts.update(image_size=self.image_size, n_z=self.n_z)
        if not self.gender_on:
            opts["tile_s"] = 0
        else:
            opts.setdefault("tile_s", 1)
        return ArchConfig.from_dict(opts)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        d = dict(d)
        weights = d.pop("weights", None) or {k: d.pop(k) for k in ("lambda", "gamma", "phi") if k in d}
        kwargs = {k: v for k, v in d.items() if k in known}
        return cls(weights=LossWeights.from_dict(weights), **kwargs)


def sample_prior(n: int, dim: int, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """i.i.d. draws from U(-1, 1)^dim."""
    if n < 1:
        raise ValueError("n must be >= 1")
    u = torch.rand((n, dim), generator=generator, dtype=torch.float64)
    return (2.0 * u - 1.0).to(dtype)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, step: int, epoch: int, report: LossReport, wall_clock: float):
        self.records.append({"step": step, "epoch": epoch, "wall_clock": wall_clock, **report.as_dict()})

    def __len__(self):
        return len(self.records)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "TrainLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def _finite_or_raise(name: str, value: torch.Tensor, step: int):
    if not torch.isfinite(value).all():
        raise NonFiniteLoss(name, step, float(value.detach()))


class CAAETrainer:
    """Owns the networks and optimizers of one model during training.

    Each ``train_step`` runs, in order: one D_img update, one D_z update and
    one joint encoder/generator update, each with its own Adam optimizer.
    """

    def __init__(self, config: TrainConfig, nets: CAAENetworks | None = None, dtype=torch.float32):
        self.config = config
        self.arch = config.arch_config()
        self.nets = nets if nets is not None else init_params(self.arch, config.seed, dtype)
        if self.nets.arch != self.arch:
            raise BadConfig("network architecture does not match the training config")
        self.dtype = next(self.nets.encoder.parameters()).dtype
        betas = (config.beta1, config.beta2)
        lr = config.learning_rate
        self.opt_dimg = torch.optim.Adam(self.nets.dimg.parameters(), lr=lr, betas=betas)
        self.opt_dz = torch.optim.Adam(self.nets.dz.parameters(), lr=lr, betas=betas)
        self.opt_eg = torch.optim.Adam([*self.nets.encoder.parameters(), *self.nets.generator.parameters()],
                                       lr=lr, betas=betas)
        self.prior_gen = torch.Generator().manual_seed(int(np.random.SeedSequence([config.seed, 1]).generate_state(1)[0]))
        self.step = 0

    def eg_parts(self, x: torch.Tensor, labels: torch.Tensor) -> dict:
        """Encoder/generator loss terms (as tensors) for one batch."""
        nets = self.nets
        z = nets.encoder(x)
        xhat = nets.generator(torch.cat([z, labels], dim=1))
        parts = {
            "recon": reconstruction_loss(x, xhat),
            "tv": tv_loss_nchw(xhat),
            "adv_gen_z": generator_loss_from_logits(nets.dz(z), self.config.saturating),
            "adv_gen_img": generator_loss_from_logits(nets.dimg(xhat, labels), self.config.saturating),
            "feat": (feature_loss(nets.fm(x), nets.fm(xhat)) if self.config.vgg_on
                     else torch.zeros((), dtype=x.dtype)),
        }
        return parts

    def dimg_loss(self, x, labels):
        with torch.no_grad():
            xhat = self.nets.generator(torch.cat([self.nets.encoder(x), labels], dim=1))
        return discriminator_loss_from_logits(self.nets.dimg(x, labels), self.nets.dimg(xhat, labels))

    def dz_loss(self, x, prior):
        with torch.no_grad():
            z = self.nets.encoder(x)
        return discriminator_loss_from_logits(self.nets.dz(prior), self.nets.dz(z))

    def train_step(self, x, groups, sexes) -> LossReport:
        """One alternating update on a batch; ``x`` is NCHW or NHWC."""
        if not torch.is_tensor(x) or x.shape[-1] == 3:
            x = to_nchw(x, self.dtype, self.arch.image_size)
        if x.shape[0] == 0:
            raise ShapeMismatch("empty batch")
        labels = label_block(groups, sexes, self.arch.tile_l, self.arch.tile_s, self.dtype)
        step = self.step

        loss_dimg = self.dimg_loss(x, labels)
        _finite_or_raise("adv_dimg", loss_dimg, step)
        self.opt_dimg.zero_grad(set_to_none=True)
        loss_dimg.backward()
        self.opt_dimg.step()

        prior = sample_prior(x.shape[0], self.arch.n_z, self.prior_gen, self.dtype)
        loss_dz = self.dz_loss(x, prior)
        _finite_or_raise("adv_dz", loss_dz, step)
        self.opt_dz.zero_grad(set_to_none=True)
        loss_dz.backward()
        self.opt_dz.step()

        parts = self.eg_parts(x, labels)
        for name, value in parts.items():
            _finite_or_raise(name, value, step)
        total = compose_eg_loss(parts, self.config.weights, self.config.ablation)
        _finite_or_raise("total", total, step)
        self.opt_eg.zero_grad(set_to_none=True)
        total.backward()
        self.opt_eg.step()
        # gradients that leaked into the discriminators are discarded
        self.nets.dz.zero_grad(set_to_none=True)
        self.nets.dimg.zero_grad(set_to_none=True)

        self.step += 1
        return LossReport(adv_dimg=float(loss_dimg.detach()), adv_dz=float(loss_dz.detach()), total=float(total.detach()),
                          **{k: float(v.detach()) for k, v in parts.items()})


def train(config: TrainConfig, images, groups, sexes, out_dir=None, nets: CAAENetworks | None = None,
          meta: dict | None = None):
    """Train one model; returns ``(networks, TrainLog)``.

    Runs ``epochs * ceil(N / batch_size)`` steps. Batch order is a seeded
    permutation per epoch. With ``out_dir`` the final checkpoint goes to
    ``out_dir/final``, intermediate ones to ``out_dir/checkpoints/step_NNNNNN``
    and the log to ``out_dir/train_log.ndjson``.
    """
    images = check_images(images, config.image_size)
    n = images.shape[0]
    if n == 0:
        raise EmptySource("no training images")
    groups = check_groups(groups, n)
    sexes = check_sexes(sexes, n)

    trainer = CAAETrainer(config, nets)
    data = to_nchw(images, trainer.dtype)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    out_dir = Path(out_dir) if out_dir is not None else None
    meta = {"train_config": config.to_dict(), **(meta or {})}
    tlog = TrainLog()
    bs = int(config.batch_size)
    steps_per_epoch = math.ceil(n / bs)
    start = time.perf_counter()
    for epoch in range(int(config.epochs)):
        perm = order_rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * bs:(b + 1) * bs]
            try:
                report = trainer.train_step(data[idx], groups[idx], sexes[idx])
            except NonFiniteLoss as exc:
                log.error("training aborted: %s", exc)
                raise
            tlog.append(trainer.step, epoch, report, time.perf_counter() - start)
            if out_dir is not None and config.checkpoint_every and trainer.step % config.checkpoint_every == 0:
                save_checkpoint(trainer.nets, out_dir / "checkpoints" / f"step_{trainer.step:06d}",
                                meta={**meta, "step": trainer.step})
        log.info("epoch %d/%d: %s", epoch + 1, config.epochs,
                 {k: round(v, 4) for k, v in tlog.records[-1].items() if k not in ("step", "epoch", "wall_clock")})
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(trainer.nets, out_dir / "final", meta={**meta, "step": trainer.step})
        tlog.write(out_dir / "train_log.ndjson")
    return trainer.nets, tlog


@torch.no_grad()
def simulate_ages(nets: CAAENetworks, x, sex) -> np.ndarray:
    """Encode ``x`` once and decode it into each of the ten age groups.

    Returns a 10 x H x W x 3 array, youngest group first.
    """
    x = check_images(x, nets.arch.image_size, allow_single=True)
    if x.shape[0] != 1:
        raise ShapeMismatch("simulate_ages takes a single image")
    return simulate_batch(nets, x, check_sexes([sex], 1))[0]


@torch.no_grad()
def simulate_batch(nets: CAAENetworks, images, sexes, batch_size: int = 64) -> np.ndarray:
    """Age simulations for many inputs: N x 10 x H x W x 3."""
    images = check_images(images, nets.arch.image_size)
    sexes = check_sexes(sexes, images.shape[0])
    dtype = next(nets.encoder.parameters()).dtype
    out = []
    groups = torch.arange(N_GROUPS)
    for start in range(0, images.shape[0], batch_size):
        x = to_nchw(images[start:start + batch_size], dtype)
        z = nets.encoder(x)
        k = z.shape[0]
        zz = z.repeat_interleave(N_GROUPS, dim=0)
        g = groups.repeat(k)
        s = torch.as_tensor(sexes[start:start + k]).repeat_interleave(N_GROUPS)
        labels = label_block(g, s, nets.arch.tile_l, nets.arch.tile_s, dtype)
        gen = nets.generator(torch.cat([zz, labels], dim=1))
        out.append(gen.permute(0, 2, 3, 1).reshape(k, N_GROUPS, *gen.shape[2:], 3).cpu().numpy())
    size = nets.arch.image_size
    return np.concatenate(out) if out else np.zeros((0, N_GROUPS, size, size, 3), np.float32)
