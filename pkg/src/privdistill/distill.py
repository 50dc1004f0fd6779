"""Distillation defenses: adversarial imitation (AKD) and plain output matching (DMP).

A frozen, query-only teacher labels unlabeled proxy inputs on the fly. In the
adversarial mode a fresh discriminator learns to tell teacher outputs from
student outputs while the student fools it and matches teacher outputs in L1;
in the plain mode the student minimizes the L1 imitation term alone. Within
one loss evaluation the teacher and the student receive the same dropout-mask
stream, so both see the same noise draw. Ground-truth labels are never read
anywhere on this path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataio import PairedSample
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
from .train_cgan import _apply_flat_grad, flat_grad, mean_aggregate

_MODES = ("akd", "dmp")
_ADV_FORMS = ("non_saturating", "literal")


@dataclass
class DistillConfig:
    epochs: int = 200
    lam: float = 100.0
    lr: float = 2e-4
    seed: int = 0
    mode: str = "akd"
    batch_size: int = 1
    beta1: float = 0.5
    beta2: float = 0.999
    # "literal" keeps the printed sign of the student's adversarial term
    # (which rewards being detected); kept only for ablation.
    adversarial_form: str = "non_saturating"
    log_every: int = 0

    def validate(self) -> "DistillConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.adversarial_form not in _ADV_FORMS:
            raise ConfigError(
                f"adversarial_form must be one of {_ADV_FORMS}, got {self.adversarial_form!r}"
            )
        return self


class BlackBoxGenerator:
    """Query-only access to a trained generator; weights stay out of reach."""

    def __init__(self, model: UnetGenerator):
        self.__model = model
        self.query_count = 0

    def query(self, x: torch.Tensor, rng: RngState) -> torch.Tensor:
        self.query_count += 1
        with torch.no_grad():
            return self.__model.generate(x, rng)

    # Same surface as the raw models so attack code can score a wrapper too.
    generate = query


def _query_teacher(g_t, x: torch.Tensor, rng: RngState) -> torch.Tensor:
    if isinstance(g_t, BlackBoxGenerator) or not isinstance(g_t, torch.nn.Module):
        return g_t.query(x, rng)
    with torch.no_grad():
        return g_t.generate(x, rng)


def student_d_loss(
    d_s: ConvDiscriminator, g_s: UnetGenerator, g_t, x: torch.Tensor, rng: RngState
) -> torch.Tensor:
    """Discriminator loss telling teacher outputs (real) from student outputs
    (fake); both generators see the same noise draw."""
    z = rng.spawn()
    t_out = _query_teacher(g_t, x, z.clone())
    with torch.no_grad():
        s_out = g_s.generate(x, z.clone())
    p_teacher = disc_forward(d_s, t_out, x)
    p_student = disc_forward(d_s, s_out, x)
    loss = -(torch.log(p_teacher) + torch.log(1.0 - p_student))
    if not torch.isfinite(loss):
        raise NumericError("student discriminator loss is non-finite")
    return loss


def student_g_loss(
    d_s: ConvDiscriminator,
    g_s: UnetGenerator,
    g_t,
    x: torch.Tensor,
    lam: float,
    rng: RngState,
    adversarial_form: str = "non_saturating",
) -> torch.Tensor:
    loss, _ = _student_g_loss_parts(d_s, g_s, g_t, x, lam, rng, adversarial_form)
    return loss


def _student_g_loss_parts(d_s, g_s, g_t, x, lam, rng, adversarial_form="non_saturating"):
    z = rng.spawn()
    t_out = _query_teacher(g_t, x, z.clone())
    s_out = g_s.generate(x, z.clone())
    p_student = disc_forward(d_s, s_out, x)
    if adversarial_form == "non_saturating":
        adv = -torch.log(p_student)
    else:
        adv = torch.log(p_student)
    l1 = (s_out - t_out).abs().mean()
    loss = adv + lam * l1
    if not torch.isfinite(loss):
        raise NumericError("student generator loss is non-finite")
    return loss, l1


def imitation_loss(g_s: UnetGenerator, g_t, x: torch.Tensor, rng: RngState) -> torch.Tensor:
    """Plain-distillation objective: L1 between student and teacher outputs
    under a shared noise draw."""
    z = rng.spawn()
    t_out = _query_teacher(g_t, x, z.clone())
    s_out = g_s.generate(x, z.clone())
    loss = (s_out - t_out).abs().mean()
    if not torch.isfinite(loss):
        raise NumericError("imitation loss is non-finite")
    return loss


def _check_proxy(proxy: list[PairedSample]) -> None:
    if not proxy:
        raise ConfigError("proxy set is empty")
    labeled = [s.id for s in proxy if s.labeled]
    if labeled:
        raise ConfigError(f"proxy samples must be unlabeled, found labels on: {labeled[:5]}")


def _distill(teacher, proxy, arch, cfg, log_path):
    cfg.validate()
    arch.validate()
    _check_proxy(proxy)
    if isinstance(teacher, UnetGenerator):
        teacher = BlackBoxGenerator(teacher)

    g_s = init_generator(arch, mix64(cfg.seed, "student-g"))
    g_params = list(g_s.parameters())
    opt_g = torch.optim.Adam(g_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    adversarial = cfg.mode == "akd"
    if adversarial:
        d_s = init_discriminator(discriminator_arch_for(arch), mix64(cfg.seed, "student-d"))
        d_params = list(d_s.parameters())
        opt_d = torch.optim.Adam(d_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))

    noise = RngState(mix64(cfg.seed, "distill-dropout"))
    shuffle = np.random.default_rng(mix64(cfg.seed, "distill-shuffle"))
    rows = []
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(proxy))
        sums = {"d": 0.0, "g": 0.0, "l1": 0.0}
        try:
            for start in range(0, len(order), cfg.batch_size):
                batch = [proxy[int(j)] for j in order[start : start + cfg.batch_size]]
                if adversarial:
                    d_grads = []
                    for sample in batch:
                        loss = student_d_loss(d_s, g_s, teacher, sample.x, noise)
                        d_grads.append(flat_grad(loss, d_params))
                        sums["d"] += float(loss)
                    _apply_flat_grad(mean_aggregate(d_grads), d_params)
                    opt_d.step()

                g_grads = []
                for sample in batch:
                    if adversarial:
                        loss, l1 = _student_g_loss_parts(
                            d_s, g_s, teacher, sample.x, cfg.lam, noise, cfg.adversarial_form
                        )
                    else:
                        loss = imitation_loss(g_s, teacher, sample.x, noise)
                        l1 = loss
                    g_grads.append(flat_grad(loss, g_params))
                    sums["g"] += float(loss)
                    sums["l1"] += float(l1)
                _apply_flat_grad(mean_aggregate(g_grads), g_params)
                opt_g.step()
        except NumericError as err:
            raise TrainingError(f"distillation diverged at epoch {epoch}: {err}") from err
        n = len(order)
        rows.append((epoch, sums["d"] / n if adversarial else "", sums["g"] / n, sums["l1"] / n))
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            print(f"epoch {epoch + 1}/{cfg.epochs}  gs_loss={rows[-1][2]:.4f}  l1={rows[-1][3]:.4f}")

    if log_path is not None:
        path = Path(log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "ds_loss", "gs_loss", "imitation_l1"])
            writer.writerows(rows)
    return g_s


def akd_train(
    teacher,
    proxy: list[PairedSample],
    arch: GeneratorArch,
    cfg: DistillConfig,
    *,
    log_path: str | Path | None = None,
) -> UnetGenerator:
    """Adversarial distillation of a student from a query-only teacher."""
    if cfg.mode != "akd":
        raise ConfigError(f"akd_train requires mode='akd', got {cfg.mode!r}")
    return _distill(teacher, proxy, arch, cfg, log_path)


def dmp_train(
    teacher,
    proxy: list[PairedSample],
    arch: GeneratorArch,
    cfg: DistillConfig,
    *,
    log_path: str | Path | None = None,
) -> UnetGenerator:
    """Discriminator-free distillation: L1 imitation of teacher outputs only."""
    if cfg.mode != "dmp":
        raise ConfigError(f"dmp_train requires mode='dmp', got {cfg.mode!r}")
    return _distill(teacher, proxy, arch, cfg, log_path)
