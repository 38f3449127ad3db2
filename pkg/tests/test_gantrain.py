from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
import torch

from gan_pad import BONA_FIDE, PA
from gan_pad.errors import DomainError, EmptyValSet, InvalidParams, ModeError, NonFiniteLoss
from gan_pad.evaluate import ABOVE, ScoreRecord, ThresholdModel, report_from_records
from gan_pad.gantrain import (GanTrainConfig, critic_logits, dcgan_losses, dcgan_losses_from_logits,
                              epoch_discriminator_eval, gan_gradient_check, gradient_penalty, train_gan,
                              wgan_losses)
from gan_pad.models import build_critic, load_checkpoint
from gan_pad.preproc import TrainStream
from gan_pad.synthdata import DatasetIndex

from conftest import SMALL_WIDTHS


def dcgan_oracle(d_real, d_fake):
    real = sum(-math.log(r) for r in d_real) / len(d_real)
    fake = sum(-math.log(1 - f) for f in d_fake) / len(d_fake)
    gen = sum(-math.log(f) for f in d_fake) / len(d_fake)
    return 0.5 * (real + fake), gen


def test_dcgan_closed_form():
    d, g = dcgan_losses([0.5], [0.5])
    assert float(d) == pytest.approx(math.log(2), abs=1e-12)
    assert float(g) == pytest.approx(math.log(2), abs=1e-12)
    d, _ = dcgan_losses([1 - 1e-12], [1e-12])
    assert float(d) < 1e-10


def test_dcgan_matches_elementwise_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(1, 20))
        real = rng.uniform(1e-4, 1 - 1e-4, n)
        fake = rng.uniform(1e-4, 1 - 1e-4, n)
        d, g = dcgan_losses(real, fake)
        od, og = dcgan_oracle(real.tolist(), fake.tolist())
        assert abs(float(d) - od) <= 1e-6 and abs(float(g) - og) <= 1e-6


def test_dcgan_logit_form_agrees(rng):
    lr, lf = rng.normal(size=16) * 3, rng.normal(size=16) * 3
    a = dcgan_losses_from_logits(torch.tensor(lr), torch.tensor(lf))
    b = dcgan_losses(torch.sigmoid(torch.tensor(lr)), torch.sigmoid(torch.tensor(lf)))
    for x, y in zip(a, b):
        assert float(x) == pytest.approx(float(y), abs=1e-12)


@pytest.mark.parametrize("bad", [[0.0, 0.5], [1.0], [1.2], [-0.1]])
def test_dcgan_domain(bad):
    with pytest.raises(DomainError):
        dcgan_losses(bad, [0.5] * len(bad))


def test_wgan_examples(rng):
    c, g = wgan_losses([1.0, 3.0], [0.0, 2.0])
    assert float(c) == -1.0 and float(g) == -1.0
    s = rng.normal(size=7)
    assert float(wgan_losses(s, s)[0]) == 0.0


def test_wgan_elementwise_and_translation(rng):
    for _ in range(50):
        real, fake = rng.normal(size=9), rng.normal(size=9)
        c, g = wgan_losses(real, fake)
        assert abs(float(c) - (math.fsum(fake) / 9 - math.fsum(real) / 9)) <= 1e-6
        assert abs(float(g) + math.fsum(fake) / 9) <= 1e-6
    # exact invariance: integer-valued scores keep every sum exact in float64
    real = rng.integers(-50, 50, 8).astype(np.float64)
    fake = rng.integers(-50, 50, 8).astype(np.float64)
    base = float(wgan_losses(real, fake)[0])
    for shift in (1.0, -3.0, 1024.0):
        assert float(wgan_losses(real + shift, fake + shift)[0]) == base


def test_wgan_rejects_non_finite():
    with pytest.raises(DomainError):
        wgan_losses([1.0, float("nan")], [0.0, 0.0])


class LinearCritic(torch.nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = torch.nn.Parameter(w)

    def forward(self, x):
        return x.reshape(x.shape[0], -1) @ self.w


@pytest.mark.parametrize("norm,expected", [(2.0, 10.0), (1.0, 0.0), (3.5, 62.5)])
def test_gradient_penalty_linear_critic(norm, expected):
    w = torch.randn(16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    critic = LinearCritic(w / w.norm() * norm)
    real = torch.randn(5, 1, 4, 4, dtype=torch.float64)
    fake = torch.randn(5, 1, 4, 4, dtype=torch.float64)
    for seed in range(3):
        gp = gradient_penalty(critic, real, fake, torch.Generator().manual_seed(seed), 10.0)
        assert abs(float(gp.detach()) - expected) <= 1e-9


def test_gradient_penalty_rejects_batch_norm():
    critic = build_critic("wgan_clip", SMALL_WIDTHS)
    x = torch.zeros(2, 1, 64, 64)
    with pytest.raises(ModeError):
        gradient_penalty(critic, x, x, torch.Generator().manual_seed(0))


def test_critic_logits_strip_sigmoid():
    critic = build_critic("dcgan", SMALL_WIDTHS, seed=2).eval()
    x = torch.rand(3, 1, 64, 64)
    assert torch.allclose(torch.sigmoid(critic_logits(critic, x)), critic(x))


@pytest.mark.parametrize("mode", ["dcgan", "wgan_gp", "wgan_clip"])
def test_gradient_checks(mode):
    res = gan_gradient_check(mode)
    assert res["n_params"] <= 500 * 2
    assert res["critic"]["n_params"] <= 500 and res["generator"]["n_params"] <= 500
    assert res["passed"], res["max_relative_error"]


def test_config_defaults_and_validation():
    c = GanTrainConfig()
    assert (c.learning_rate, c.beta1, c.beta2, c.batch_size, c.critic_steps_per_gen_step) == (2e-4, 0.5, 0.9, 64, 3)
    assert c.epochs == 110 and c.loss_mode == "wgan_gp" and c.gp_lambda == 10
    for bad in ({"learning_rate": 0}, {"beta2": 1.0}, {"loss_mode": "hinge"}, {"critic_steps_per_gen_step": 0}):
        with pytest.raises(InvalidParams):
            GanTrainConfig(**bad)


def _run(tiny_corpus, out=None, val=None, **kw):
    cfg = GanTrainConfig(batch_size=4, epochs=kw.pop("epochs", 2), seed=kw.pop("seed", 0), **kw)
    stream = TrainStream(tiny_corpus, batch_size=4, seed=1)
    return train_gan(cfg, stream, val, out, widths=SMALL_WIDTHS, latent_dim=8)


def test_schedule_and_determinism(tiny_corpus):
    a = _run(tiny_corpus)
    b = _run(tiny_corpus)
    assert a.generator_steps == 2 * math.ceil(8 / 4)
    assert a.critic_steps == 3 * a.generator_steps
    assert a.trace == b.trace
    assert len(a.records) == 2
    c = _run(tiny_corpus, seed=1)
    assert c.trace != a.trace


def test_clipping_postcondition(tiny_corpus):
    rep = _run(tiny_corpus, loss_mode="wgan_clip", epochs=1)
    assert max(float(p.detach().abs().max()) for p in rep.critic.parameters()) <= 0.01


def test_dcgan_mode_runs(tiny_corpus):
    rep = _run(tiny_corpus, loss_mode="dcgan", epochs=1)
    assert all(math.isfinite(c) and math.isfinite(g) for c, g in rep.trace)


def test_outputs_and_tracking(tiny_corpus, tmp_path):
    rep = _run(tiny_corpus, out=tmp_path, val=tiny_corpus, checkpoint_every=1)
    assert [r.epoch for r in rep.records] == [1, 2]
    assert all(r.acer is not None and 0 <= r.acer <= 1 for r in rep.records)
    assert len(rep.checkpoints) == 2
    data = json.loads((tmp_path / "report.json").read_text())
    assert len(data["records"]) == 2
    rows = list(csv.DictReader(open(tmp_path / "detection_per_epoch.csv")))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    gen = load_checkpoint(tmp_path / "generator")
    for a, b in zip(gen.state_dict().values(), rep.generator.state_dict().values()):
        assert torch.equal(a, b.float())


def test_non_finite_loss_aborts(tiny_corpus):
    critic = build_critic("wgan_gp", SMALL_WIDTHS)
    with torch.no_grad():
        critic.head.dense.bias.fill_(float("nan"))
    cfg = GanTrainConfig(batch_size=4, epochs=1)
    with pytest.raises(NonFiniteLoss) as info:
        train_gan(cfg, TrainStream(tiny_corpus, batch_size=4), widths=SMALL_WIDTHS, latent_dim=8, critic=critic)
    assert info.value.iteration == 1


def test_mode_mismatch(tiny_corpus):
    with pytest.raises(ModeError):
        train_gan(GanTrainConfig(batch_size=4, epochs=1), TrainStream(tiny_corpus, batch_size=4),
                  widths=SMALL_WIDTHS, latent_dim=8, critic=build_critic("dcgan", SMALL_WIDTHS))


def test_discriminator_eval_counting():
    bona = [ScoreRecord(f"b{i}", [5.0], 5.0, BONA_FIDE) for i in range(4)]
    pa = [ScoreRecord(f"p{i}", [s], s, PA) for i, s in enumerate([4.0, 0.0, 0.5, 1.0])]
    model = ThresholdModel(2.0, 1.0, 1.5, ABOVE, 10)
    rep = report_from_records(bona + pa, model)
    assert rep.apcer == 0.25 and rep.bpcer == 0.0
    everything_high = [ScoreRecord(f"x{i}", [9.0], 9.0, lab) for i, lab in enumerate([BONA_FIDE, PA] * 3)]
    rep = report_from_records(everything_high, model)
    assert rep.bpcer == 0.0 and rep.apcer == 1.0


def test_discriminator_eval_empty_val(tiny_corpus):
    train_only = DatasetIndex(tiny_corpus.root, tiny_corpus.select(split="train"))
    with pytest.raises(EmptyValSet):
        epoch_discriminator_eval(build_critic("wgan_gp", SMALL_WIDTHS), train_only)
