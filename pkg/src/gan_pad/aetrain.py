"""Autoencoder fine-tuning on bona fide patches."""

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

from . import BONA_FIDE, PA
from .errors import InvalidParams, NonFiniteLoss, ShapeMismatch
from .gradcheck import finite_difference_check, flat_params
from .models import AutoencoderNet, save_checkpoint, to_tensor
from .optim import Adam
from .preproc import eval_patches
from .synthdata import DatasetIndex, load_image

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AeTrainConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 32
    epochs: int = 3000
    seed: int = 0
    checkpoint_every: int = 0
    track_validation: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidParams("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidParams("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.checkpoint_every < 0:
            raise InvalidParams("batch_size and epochs must be positive")


@dataclass
class AeEpochRecord:
    epoch: int
    train_loss: float
    val_bona_error: float | None = None
    val_pa_error: float | None = None
    wall_time: float = 0.0


@dataclass
class AeTrainReport:
    records: list[AeEpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    trace: list[float] = field(default_factory=list)
    steps: int = 0

    def to_json(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "checkpoints": self.checkpoints,
            "steps": self.steps,
            "trace": self.trace,
        }


def reconstruction_error(x, x_hat):
    """Per-sample mean squared difference over all non-batch dimensions."""
    if tuple(x.shape) != tuple(x_hat.shape):
        raise ShapeMismatch(f"reconstruction shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    diff = (x - x_hat) ** 2
    if isinstance(diff, torch.Tensor):
        return diff.reshape(diff.shape[0], -1).mean(dim=1)
    return np.asarray(diff).reshape(diff.shape[0], -1).mean(axis=1)


@torch.no_grad()
def patch_errors(ae: AutoencoderNet, patches, chunk: int = 256) -> np.ndarray:
    """Inference-mode reconstruction error of each [-1, 1] patch."""
    ae.eval()
    out = []
    for start in range(0, len(patches), chunk):
        x = ae.prepare(to_tensor(patches[start:start + chunk]))
        out.append(reconstruction_error(x, ae(x)).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def _mean_patch_error(ae, paths) -> float:
    errors = [patch_errors(ae, eval_patches(load_image(p))) for p in paths]
    return float(np.concatenate(errors).mean()) if errors else float("nan")


def finetune_ae(ae: AutoencoderNet, config: AeTrainConfig, train_stream, val_index: DatasetIndex | None = None,
                out_dir=None) -> AeTrainReport:
    """Minimize mean reconstruction error on the stream's bona fide patches."""
    if train_stream.batch_size != config.batch_size:
        raise InvalidParams(f"stream batch size {train_stream.batch_size} != config {config.batch_size}")
    out_dir = Path(out_dir) if out_dir is not None else None
    opt = Adam(ae.parameters(), config.learning_rate, config.beta1, config.beta2)
    report = AeTrainReport()
    batches = iter(train_stream)
    steps_per_epoch = train_stream.batches_per_epoch
    tracking = config.track_validation and val_index is not None
    if tracking:
        val_bona = val_index.paths(split="val", label=BONA_FIDE)
        val_pa = val_index.paths(split="val", label=PA)

    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        ae.train()
        losses = []
        for _ in range(steps_per_epoch):
            x = ae.prepare(to_tensor(next(batches)))
            opt.zero_grad()
            loss = reconstruction_error(x, ae(x)).mean()
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLoss(report.steps + 1, {"reconstruction": value})
            loss.backward()
            opt.step()
            report.steps += 1
            report.trace.append(value)
            losses.append(value)
        record = AeEpochRecord(epoch, float(np.mean(losses)))
        if tracking:
            record.val_bona_error = _mean_patch_error(ae, val_bona)
            record.val_pa_error = _mean_patch_error(ae, val_pa)
        record.wall_time = time.perf_counter() - start
        report.records.append(record)
        log.info("ae epoch %d loss %.6g val bona %s val pa %s", epoch, record.train_loss,
                 record.val_bona_error, record.val_pa_error)
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            path = save_checkpoint(ae, out_dir / "checkpoints" / f"epoch_{epoch:04d}", epoch=epoch, seed=config.seed)
            report.checkpoints.append(str(path))

    if out_dir is not None:
        write_ae_report(report, out_dir)
    return report


def write_ae_report(report: AeTrainReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    with open(out_dir / "training_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_bona", "val_pa"])
        for r in report.records:
            w.writerow([r.epoch, repr(r.train_loss),
                        "" if r.val_bona_error is None else repr(r.val_bona_error),
                        "" if r.val_pa_error is None else repr(r.val_pa_error)])


def loss_gradient_check(ae_small: AutoencoderNet, probe_batch, h: float = 1e-6, tolerance: float = 1e-3) -> dict:
    """Autograd gradient of the mean reconstruction error vs. central differences.

    Runs in double precision on a copy of ``ae_small`` in training mode.
    """
    import copy

    net = copy.deepcopy(ae_small).double().train()
    x = net.prepare(to_tensor(probe_batch, dtype=torch.float64))

    def loss_fn():
        return reconstruction_error(x, net(x)).mean()

    result = finite_difference_check(loss_fn, flat_params(net), h=h)
    result["tolerance"] = tolerance
    result["passed"] = result["max_relative_error"] <= tolerance
    return result
