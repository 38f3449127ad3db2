from __future__ import annotations

import csv
import json

import numpy as np
import pytest
import torch

from gan_pad.aetrain import (AeTrainConfig, finetune_ae, loss_gradient_check, patch_errors, reconstruction_error)
from gan_pad.errors import InvalidParams, NonFiniteLoss, ShapeMismatch
from gan_pad.gantrain import _probe_init
from gan_pad.models import build_autoencoder, to_tensor
from gan_pad.preproc import TrainStream

from conftest import SMALL_WIDTHS

REDUCED = (1, 1, 1, 1)


def loop_mse(x, y):
    """Double-precision per-pixel loop."""
    out = []
    for i in range(x.shape[0]):
        total = 0.0
        flat_x, flat_y = x[i].ravel(), y[i].ravel()
        for a, b in zip(flat_x.tolist(), flat_y.tolist()):
            total += (a - b) ** 2
        out.append(total / flat_x.size)
    return np.array(out)


def test_reconstruction_error_examples(rng):
    x = rng.uniform(-1, 1, (3, 1, 8, 8))
    assert np.all(reconstruction_error(x, x) == 0)
    assert np.all(reconstruction_error(-np.ones((2, 1, 4, 4)), np.ones((2, 1, 4, 4))) == 4.0)
    y = rng.uniform(-1, 1, (3, 1, 8, 8))
    np.testing.assert_allclose(reconstruction_error(x, y), loop_mse(x, y), rtol=0, atol=1e-6)
    t = reconstruction_error(torch.tensor(x, dtype=torch.float32), torch.tensor(y, dtype=torch.float32))
    np.testing.assert_allclose(t.numpy(), loop_mse(x, y), rtol=0, atol=1e-6)
    assert np.all(reconstruction_error(x, y) >= 0)


def test_reconstruction_error_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        reconstruction_error(np.zeros((2, 1, 4, 4)), np.zeros((2, 1, 4, 5)))


def test_config_defaults():
    c = AeTrainConfig()
    assert (c.learning_rate, c.beta1, c.beta2, c.batch_size, c.epochs) == (1e-5, 0.5, 0.999, 32, 3000)
    with pytest.raises(InvalidParams):
        AeTrainConfig(learning_rate=-1)


@pytest.mark.parametrize("source", ["transfer_shape", "scratch"])
def test_gradient_check_reduced_net(source, rng):
    ae = _probe_init(build_autoencoder(source, "wgan_gp", REDUCED), 0)
    assert sum(p.numel() for p in ae.parameters()) <= 500
    probe = rng.uniform(-1, 1, (4, 64, 64, 1))
    res = loss_gradient_check(ae, probe)
    assert res["passed"], res["max_relative_error"]


def test_zero_gradient_at_exact_reconstruction():
    ae = build_autoencoder("transfer_shape", "wgan_gp", REDUCED).double().train()
    with torch.no_grad():
        ae.decoder.up4.weight.zero_()
        ae.decoder.up4.bias.zero_()
    x = torch.zeros(2, 1, 64, 64, dtype=torch.float64)  # tanh(0) reproduces the input exactly
    loss = reconstruction_error(x, ae(x)).mean()
    grad, = torch.autograd.grad(loss, [ae.decoder.up4.bias])
    assert float(grad.abs().max()) <= 1e-12


def test_first_order_taylor(rng):
    ae = _probe_init(build_autoencoder("transfer_shape", "wgan_gp", REDUCED), 1).double().train()
    x = to_tensor(rng.uniform(-1, 1, (3, 64, 64, 1)), dtype=torch.float64)

    def loss():
        return reconstruction_error(x, ae(x)).mean()

    w = ae.encoder.conv2.weight
    grad, = torch.autograd.grad(loss(), [w])
    idx = tuple(int(i) for i in np.unravel_index(int(grad.abs().argmax()), grad.shape))
    base = float(loss().detach())
    step = -1e-4 * float(torch.sign(grad[idx]))
    with torch.no_grad():
        w[idx] += step
    moved = float(loss().detach())
    assert moved < base
    assert (moved - base) == pytest.approx(float(grad[idx]) * step, rel=0.05)


def _train(corpus, epochs=10, seed=0, val=None, out=None, source="transfer_shape", lr=1e-3):
    ae = build_autoencoder(source, "wgan_gp", SMALL_WIDTHS, seed=4)
    cfg = AeTrainConfig(learning_rate=lr, batch_size=4, epochs=epochs, seed=seed, track_validation=val is not None)
    return ae, finetune_ae(ae, cfg, TrainStream(corpus, batch_size=4, seed=seed), val, out)


def test_smoke_loss_decreases(tiny_corpus):
    _, report = _train(tiny_corpus, epochs=10)
    assert len(report.records) == 10
    assert report.records[-1].train_loss < report.records[0].train_loss


def test_scratch_variant_trains(tiny_corpus):
    _, report = _train(tiny_corpus, epochs=5, source="scratch")
    assert report.records[-1].train_loss < report.records[0].train_loss


def test_determinism(tiny_corpus):
    a = _train(tiny_corpus, epochs=3)[1]
    b = _train(tiny_corpus, epochs=3)[1]
    assert a.trace == b.trace


def test_tracking_fields_and_files(tiny_corpus, tmp_path):
    ae, report = _train(tiny_corpus, epochs=2, val=tiny_corpus, out=tmp_path)
    assert all(r.val_bona_error is not None and r.val_pa_error is not None for r in report.records)
    rows = list(csv.DictReader(open(tmp_path / "training_curve.csv")))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert float(rows[1]["val_pa"]) == report.records[1].val_pa_error
    assert len(json.loads((tmp_path / "report.json").read_text())["records"]) == 2
    _, untracked = _train(tiny_corpus, epochs=1)
    assert untracked.records[0].val_bona_error is None


def test_batch_size_mismatch(tiny_corpus):
    ae = build_autoencoder(widths=SMALL_WIDTHS)
    with pytest.raises(InvalidParams):
        finetune_ae(ae, AeTrainConfig(batch_size=8, epochs=1), TrainStream(tiny_corpus, batch_size=4))


def test_non_finite_aborts(tiny_corpus):
    ae = build_autoencoder(widths=SMALL_WIDTHS)
    with torch.no_grad():
        ae.decoder.up4.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss):
        finetune_ae(ae, AeTrainConfig(batch_size=4, epochs=1), TrainStream(tiny_corpus, batch_size=4))


def test_patch_errors_inference_determinism(rng):
    ae = build_autoencoder(widths=SMALL_WIDTHS, seed=1)
    patches = rng.uniform(-1, 1, (5, 64, 64)).astype(np.float32)
    a, b = patch_errors(ae, patches), patch_errors(ae, patches)
    assert np.array_equal(a, b)
    assert np.array_equal(patch_errors(ae, patches[:2]), a[:2])
