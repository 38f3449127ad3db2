"""Adversarial pretraining of the generator and critic.

Three loss modes are supported: ``dcgan`` (sigmoid discriminator, binary
cross-entropy), ``wgan_gp`` (Wasserstein critic with gradient penalty) and
``wgan_clip`` (Wasserstein critic with weight clipping). Every generator update
is preceded by ``critic_steps_per_gen_step`` critic updates, each on a fresh
real batch and fresh fakes.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import BONA_FIDE, PA
from .errors import DomainError, EmptyValSet, InvalidParams, ModeError, NonFiniteLoss
from .evaluate import ABOVE, EvalReport, calibrate_threshold, report_from_records, score_index_with_critic
from .gradcheck import finite_difference_check, flat_params
from .models import (DEFAULT_WIDTHS, LATENT_DIM, LOSS_MODES, CriticNet, GeneratorNet, build_critic,
                     build_generator, save_checkpoint, to_tensor)
from .optim import Adam, adam_step  # noqa: F401  (adam_step is part of this module's surface)
from .rng import subsystem_seed
from .synthdata import DatasetIndex

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GanTrainConfig:
    loss_mode: str = "wgan_gp"
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    critic_steps_per_gen_step: int = 3
    batch_size: int = 64
    epochs: int = 110
    gp_lambda: float = 10.0
    clip_value: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise InvalidParams(f"unknown loss mode {self.loss_mode!r}")
        if not self.learning_rate > 0:
            raise InvalidParams("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidParams("betas must lie in [0, 1)")
        if self.critic_steps_per_gen_step < 1 or self.batch_size < 1 or self.epochs < 1:
            raise InvalidParams("critic steps, batch size and epochs must be positive")
        if self.gp_lambda < 0 or self.clip_value <= 0 or self.checkpoint_every < 0:
            raise InvalidParams("gp_lambda must be >= 0 and clip_value > 0")


@dataclass
class GanEpochRecord:
    epoch: int
    critic_loss: float
    generator_loss: float
    wall_time: float
    apcer: float | None = None
    bpcer: float | None = None
    acer: float | None = None


@dataclass
class GanTrainReport:
    records: list[GanEpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    trace: list[tuple[float, float]] = field(default_factory=list)
    generator_steps: int = 0
    critic_steps: int = 0
    generator: GeneratorNet | None = field(default=None, repr=False)
    critic: CriticNet | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "checkpoints": self.checkpoints,
            "generator_steps": self.generator_steps,
            "critic_steps": self.critic_steps,
            "trace": [list(t) for t in self.trace],
        }


# --------------------------------------------------------------------------
# losses


def dcgan_losses(d_real, d_fake):
    """Discriminator and non-saturating generator losses from sigmoid outputs."""
    d_real = torch.as_tensor(d_real, dtype=torch.float64) if not torch.is_tensor(d_real) else d_real
    d_fake = torch.as_tensor(d_fake, dtype=torch.float64) if not torch.is_tensor(d_fake) else d_fake
    for name, s in (("d_real", d_real), ("d_fake", d_fake)):
        if not bool(((s > 0) & (s < 1)).all()):
            raise DomainError(f"{name} scores must lie strictly inside (0, 1)")
    d_loss = 0.5 * ((-torch.log(d_real)).mean() + (-torch.log1p(-d_fake)).mean())
    g_loss = (-torch.log(d_fake)).mean()
    return d_loss, g_loss


def dcgan_losses_from_logits(logit_real, logit_fake):
    """Same losses as ``dcgan_losses``, evaluated stably on pre-sigmoid logits."""
    d_loss = 0.5 * (F.softplus(-logit_real).mean() + F.softplus(logit_fake).mean())
    g_loss = F.softplus(-logit_fake).mean()
    return d_loss, g_loss


def wgan_losses(scores_real, scores_fake):
    scores_real = torch.as_tensor(scores_real, dtype=torch.float64) if not torch.is_tensor(scores_real) else scores_real
    scores_fake = torch.as_tensor(scores_fake, dtype=torch.float64) if not torch.is_tensor(scores_fake) else scores_fake
    if not (bool(torch.isfinite(scores_real).all()) and bool(torch.isfinite(scores_fake).all())):
        raise DomainError("critic scores must be finite")
    return _wgan_terms(scores_real, scores_fake)


def _wgan_terms(scores_real, scores_fake):
    # Unchecked core: inside training a non-finite score must surface as NonFiniteLoss.
    return scores_fake.mean() - scores_real.mean(), -scores_fake.mean()


def gradient_penalty(critic, real_batch, fake_batch, rng: torch.Generator, lam: float = 10.0):
    """``lam * mean((||grad_x critic(x_hat)||_2 - 1)^2)`` on random interpolates."""
    if isinstance(critic, torch.nn.Module) and any(
            isinstance(m, torch.nn.modules.batchnorm._BatchNorm) for m in critic.modules()):
        raise ModeError("gradient penalty requires a critic without batch normalization")
    if real_batch.shape != fake_batch.shape:
        raise InvalidParams("real and fake batches must have the same shape")
    n = real_batch.shape[0]
    eps = torch.rand((n,) + (1,) * (real_batch.ndim - 1), generator=rng, dtype=real_batch.dtype)
    x_hat = (eps * real_batch + (1 - eps) * fake_batch).detach().requires_grad_(True)
    scores = critic(x_hat)
    grads, = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grads.reshape(n, -1).norm(2, dim=1)
    return lam * ((norms - 1.0) ** 2).mean()


def critic_logits(critic: CriticNet, x):
    """Critic output before a sigmoid head (identical to ``critic(x)`` for Wasserstein critics)."""
    out = critic.head[:-1](critic.features(x)) if critic.loss_mode == "dcgan" else critic.head(critic.features(x))
    return out.reshape(-1)


def critic_objective(config: GanTrainConfig, critic, real, fake, rng):
    if config.loss_mode == "dcgan":
        d_loss, _ = dcgan_losses_from_logits(critic_logits(critic, real), critic_logits(critic, fake))
        return d_loss
    loss, _ = _wgan_terms(critic(real), critic(fake))
    if config.loss_mode == "wgan_gp":
        loss = loss + gradient_penalty(critic, real, fake, rng, config.gp_lambda)
    return loss


def generator_objective(config: GanTrainConfig, critic, fake):
    if config.loss_mode == "dcgan":
        logits = critic_logits(critic, fake)
        return F.softplus(-logits).mean()
    return -critic(fake).mean()


@torch.no_grad()
def clip_weights(critic, clip_value):
    for p in critic.parameters():
        p.clamp_(-clip_value, clip_value)


# --------------------------------------------------------------------------
# training


def train_gan(config: GanTrainConfig, stream, val_index: DatasetIndex | None = None, out_dir=None,
              widths=DEFAULT_WIDTHS, latent_dim=LATENT_DIM, generator=None, critic=None) -> GanTrainReport:
    """Run the adversarial schedule for ``config.epochs`` epochs.

    An epoch is ``stream.batches_per_epoch`` generator updates. When
    ``val_index`` is given, the critic is evaluated as a detector after every
    epoch (calibrated on the index's bona fide training images).
    """
    if stream.batch_size != config.batch_size:
        raise InvalidParams(f"stream batch size {stream.batch_size} != config {config.batch_size}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if generator is None:
        generator = build_generator(widths, latent_dim, seed=subsystem_seed(config.seed, "init_generator"))
    if critic is None:
        critic = build_critic(config.loss_mode, widths, seed=subsystem_seed(config.seed, "init_critic"))
    if critic.loss_mode != config.loss_mode:
        raise ModeError(f"critic built for {critic.loss_mode}, config asks for {config.loss_mode}")
    if val_index is not None and not val_index.select(split="val"):
        raise EmptyValSet("validation split is empty")

    rng = torch.Generator().manual_seed(subsystem_seed(config.seed, "training") % 2**63)
    g_opt = Adam(generator.parameters(), config.learning_rate, config.beta1, config.beta2)
    c_opt = Adam(critic.parameters(), config.learning_rate, config.beta1, config.beta2)
    report = GanTrainReport(generator=generator, critic=critic)
    batches = iter(stream)
    n = config.batch_size
    start = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        c_losses, g_losses = [], []
        for _ in range(stream.batches_per_epoch):
            generator.train()
            critic.train()
            for _ in range(config.critic_steps_per_gen_step):
                real = to_tensor(next(batches))
                z = torch.randn(n, generator.latent_dim, generator=rng)
                with torch.no_grad():
                    fake = generator(z)
                c_opt.zero_grad()
                c_loss = critic_objective(config, critic, real, fake, rng)
                c_loss.backward()
                c_opt.step()
                if config.loss_mode == "wgan_clip":
                    clip_weights(critic, config.clip_value)
                report.critic_steps += 1

            z = torch.randn(n, generator.latent_dim, generator=rng)
            g_opt.zero_grad()
            critic.zero_grad(set_to_none=True)
            g_loss = generator_objective(config, critic, generator(z))
            g_loss.backward()
            g_opt.step()
            report.generator_steps += 1

            cv, gv = float(c_loss.detach()), float(g_loss.detach())
            if not (math.isfinite(cv) and math.isfinite(gv)):
                raise NonFiniteLoss(report.generator_steps, {"critic": cv, "generator": gv})
            report.trace.append((cv, gv))
            c_losses.append(cv)
            g_losses.append(gv)

        record = GanEpochRecord(epoch, float(np.mean(c_losses)), float(np.mean(g_losses)), 0.0)
        if val_index is not None:
            ev = epoch_discriminator_eval(critic, val_index)
            record.apcer, record.bpcer, record.acer = ev.apcer, ev.bpcer, ev.acer
        record.wall_time = time.perf_counter() - start
        report.records.append(record)
        log.info("gan epoch %d critic %.5g generator %.5g acer %s", epoch, record.critic_loss,
                 record.generator_loss, record.acer)
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            report.checkpoints.append(str(save_gan(generator, critic, out_dir / "checkpoints" / f"epoch_{epoch:04d}",
                                                   epoch=epoch, seed=config.seed)))

    if out_dir is not None:
        save_gan(generator, critic, out_dir, epoch=config.epochs, seed=config.seed)
        write_gan_report(report, out_dir)
    return report


def save_gan(generator, critic, directory, **metadata) -> Path:
    directory = Path(directory)
    save_checkpoint(generator, directory / "generator", **metadata)
    save_checkpoint(critic, directory / "critic", **metadata)
    return directory


def write_gan_report(report: GanTrainReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    if any(r.acer is not None for r in report.records):
        with open(out_dir / "detection_per_epoch.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "apcer", "bpcer", "acer"])
            for r in report.records:
                w.writerow([r.epoch, r.apcer, r.bpcer, r.acer])


def epoch_discriminator_eval(critic, val_index: DatasetIndex, calibration=None) -> EvalReport:
    """Classify validation images by their mean critic patch score.

    Bona fide iff the mean score exceeds ``mean - std`` of the bona fide
    training images' scores; the calibration is computed from ``val_index``'s
    training split when not supplied.
    """
    if not val_index.select(split="val"):
        raise EmptyValSet("validation split is empty")
    if calibration is None:
        train = score_index_with_critic(critic, val_index, "train", (BONA_FIDE,))
        calibration = calibrate_threshold([r.image_score for r in train], direction=ABOVE)
    records = score_index_with_critic(critic, val_index, "val", (BONA_FIDE, PA))
    return report_from_records(records, calibration)


# --------------------------------------------------------------------------
# gradient verification on reduced nets

REDUCED_WIDTHS = (1, 1, 1, 1)
REDUCED_LATENT = 8


def _probe_init(net, seed, std=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("weight") and p.ndim > 1:
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
            else:
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.1 + (1.0 if "bn" in name and
                                                                                     name.endswith("weight") else 0.0))
    return net


def gan_gradient_check(loss_mode: str, seed: int = 0, batch: int = 4, h: float = 1e-6, tolerance: float = 1e-3) -> dict:
    """Finite-difference check of critic and generator objectives on reduced nets (double precision)."""
    config = GanTrainConfig(loss_mode=loss_mode, batch_size=batch)
    gen = _probe_init(build_generator(REDUCED_WIDTHS, REDUCED_LATENT).double().train(), seed)
    critic = _probe_init(build_critic(loss_mode, REDUCED_WIDTHS).double().train(), seed + 1)
    g = torch.Generator().manual_seed(seed + 2)
    real = torch.rand(batch, 1, 64, 64, generator=g, dtype=torch.float64) * 2 - 1
    z = torch.randn(batch, REDUCED_LATENT, generator=g, dtype=torch.float64)
    with torch.no_grad():
        fake = gen(z)

    def critic_loss():
        return critic_objective(config, critic, real, fake, torch.Generator().manual_seed(seed + 3))

    def generator_loss():
        return generator_objective(config, critic, gen(z))

    c = finite_difference_check(critic_loss, flat_params(critic), h=h)
    gres = finite_difference_check(generator_loss, flat_params(gen), h=h)
    worst = max(c["max_relative_error"], gres["max_relative_error"])
    return {
        "loss_mode": loss_mode,
        "critic": c,
        "generator": gres,
        "n_params": c["n_params"] + gres["n_params"],
        "max_relative_error": worst,
        "tolerance": tolerance,
        "passed": worst <= tolerance,
    }

