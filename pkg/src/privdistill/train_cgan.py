"""Undefended adversarial training of the private translation model.

The discriminator minimizes -[log D(y, x) + log(1 - D(G(z, x), x))]; the
generator minimizes the non-saturating -log D(G(z, x), x) plus a weighted
per-pixel L1 term against the ground truth. Updates alternate one D step and
one G step per batch. Gradients flow through a per-example pipeline with an
optional aggregation hook so privacy-preserving variants can clip and noise
per-example gradients while sharing this exact loop.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .dataio import DatasetSplits
from .errors import ConfigError, NumericError, TrainingError
from .nets import (
    ConvDiscriminator,
    GeneratorArch,
    UnetGenerator,
    disc_forward,
    discriminator_arch_for,
    init_discriminator,
    init_generator,
)
from .rng import RngState, mix64

# Aggregates a list of per-example flat gradient vectors into one update
# direction. The default is the plain mean; DP-SGD swaps in clip-then-noise.
GradAggregator = Callable[[list[torch.Tensor]], torch.Tensor]


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1
    lr: float = 2e-4
    lambda_l1: float = 100.0
    seed: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    log_every: int = 0  # print a progress line every N epochs; 0 = silent

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_l1 < 0:
            raise ConfigError(f"lambda_l1 must be >= 0, got {self.lambda_l1}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        return self


def d_loss(
    d: ConvDiscriminator, g: UnetGenerator, x: torch.Tensor, y: torch.Tensor, rng: RngState
) -> torch.Tensor:
    """Discriminator loss on one labeled pair; the generated branch is detached."""
    with torch.no_grad():
        fake = g.generate(x, rng)
    p_real = disc_forward(d, y, x)
    p_fake = disc_forward(d, fake, x)
    loss = -(torch.log(p_real) + torch.log(1.0 - p_fake))
    if not torch.isfinite(loss):
        raise NumericError("discriminator loss is non-finite")
    return loss


def g_loss(
    d: ConvDiscriminator,
    g: UnetGenerator,
    x: torch.Tensor,
    y: torch.Tensor,
    rng: RngState,
    lambda_l1: float = 100.0,
) -> torch.Tensor:
    loss, _ = _g_loss_parts(d, g, x, y, rng, lambda_l1)
    return loss


def _g_loss_parts(d, g, x, y, rng, lambda_l1):
    fake = g.generate(x, rng)
    p_fake = disc_forward(d, fake, x)
    l1 = (fake - y).abs().mean()
    loss = -torch.log(p_fake) + lambda_l1 * l1
    if not torch.isfinite(loss):
        raise NumericError("generator loss is non-finite")
    return loss, l1


def mean_aggregate(grads: list[torch.Tensor]) -> torch.Tensor:
    if len(grads) == 1:  # bitwise-equal shortcut for the default batch size
        return grads[0]
    return torch.stack(grads).mean(dim=0)


def flat_grad(loss: torch.Tensor, params: list[torch.Tensor]) -> torch.Tensor:
    parts = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat(
        [
            (p.reshape(-1) if p is not None else torch.zeros(param.numel(), dtype=param.dtype))
            for p, param in zip(parts, params)
        ]
    )


def _apply_flat_grad(vec: torch.Tensor, params: list[torch.Tensor]) -> None:
    offset = 0
    for param in params:
        n = param.numel()
        param.grad = vec[offset : offset + n].view(param.shape)
        offset += n


def run_adversarial_training(
    splits: DatasetSplits,
    arch: GeneratorArch,
    cfg: TrainConfig,
    *,
    d_aggregate: GradAggregator | None = None,
    g_aggregate: GradAggregator | None = None,
    log_path: str | Path | None = None,
) -> UnetGenerator:
    """Shared teacher-training engine; returns the generator only."""
    cfg.validate()
    arch.validate()
    train = splits.train
    if not train:
        raise ConfigError("training split is empty")
    if any(not s.labeled for s in train):
        raise ConfigError("training split must be fully labeled")

    g = init_generator(arch, mix64(cfg.seed, "teacher-g"))
    d = init_discriminator(discriminator_arch_for(arch), mix64(cfg.seed, "teacher-d"))
    g_params = list(g.parameters())
    d_params = list(d.parameters())
    opt_g = torch.optim.Adam(g_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), foreach=True)
    opt_d = torch.optim.Adam(d_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), foreach=True)
    d_aggregate = d_aggregate or mean_aggregate
    g_aggregate = g_aggregate or mean_aggregate

    noise = RngState(mix64(cfg.seed, "dropout"))
    shuffle = np.random.default_rng(mix64(cfg.seed, "shuffle"))
    rows = []
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(train))
        sums = {"d": 0.0, "g": 0.0, "l1": 0.0}
        try:
            for start in range(0, len(order), cfg.batch_size):
                batch = [train[int(j)] for j in order[start : start + cfg.batch_size]]

                d_grads = []
                for sample in batch:
                    loss = d_loss(d, g, sample.x, sample.y, noise)
                    d_grads.append(flat_grad(loss, d_params))
                    sums["d"] += float(loss.detach())
                _apply_flat_grad(d_aggregate(d_grads), d_params)
                opt_d.step()

                g_grads = []
                for sample in batch:
                    loss, l1 = _g_loss_parts(d, g, sample.x, sample.y, noise, cfg.lambda_l1)
                    g_grads.append(flat_grad(loss, g_params))
                    sums["g"] += float(loss.detach())
                    sums["l1"] += float(l1.detach())
                _apply_flat_grad(g_aggregate(g_grads), g_params)
                opt_g.step()
        except NumericError as err:
            raise TrainingError(f"training diverged at epoch {epoch}: {err}") from err
        n = len(order)
        rows.append((epoch, sums["d"] / n, sums["g"] / n, sums["l1"] / n))
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            print(
                f"epoch {epoch + 1}/{cfg.epochs}  d_loss={rows[-1][1]:.4f}  "
                f"g_loss={rows[-1][2]:.4f}  train_l1={rows[-1][3]:.4f}"
            )

    if log_path is not None:
        path = Path(log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "d_loss", "g_loss", "train_l1"])
            writer.writerows(rows)
    return g


def train_regular(
    splits: DatasetSplits,
    arch: GeneratorArch,
    cfg: TrainConfig,
    *,
    log_path: str | Path | None = None,
) -> UnetGenerator:
    """Train without any defense; the discriminator is discarded."""
    return run_adversarial_training(splits, arch, cfg, log_path=log_path)
