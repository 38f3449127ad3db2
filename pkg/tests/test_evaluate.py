from __future__ import annotations

import csv
import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gan_pad import BONA_FIDE, PA
from gan_pad.errors import InsufficientData, MissingClass
from gan_pad.evaluate import (ABOVE, BELOW, ScoreRecord, ThresholdModel, calibrate_from_records, calibrate_model,
                              calibrate_threshold, compute_rates, decide, det_curve, evaluate_model, plot_det,
                              rates_at, read_scores, score_image, write_det)
from gan_pad.models import build_autoencoder
from gan_pad.synthdata import load_image

from conftest import SMALL_WIDTHS


def records_from(scores, labels, decisions=None):
    return [ScoreRecord(f"img{i}", [s], s, lab, None if decisions is None else decisions[i])
            for i, (s, lab) in enumerate(zip(scores, labels))]


def confusion_oracle(labels, decisions):
    tp = fn = fp = tn = 0  # "positive" = attack
    for lab, dec in zip(labels, decisions):
        if lab == PA:
            if dec == PA:
                tp += 1
            else:
                fn += 1
        else:
            if dec == PA:
                fp += 1
            else:
                tn += 1
    apcer = fn / (tp + fn)
    bpcer = fp / (fp + tn)
    return apcer, bpcer, (apcer + bpcer) / 2


def det_oracle(bona, pa, taus):
    out = []
    for t in taus:
        acc_pa = sum(1 for s in pa if s < t)
        rej_bona = sum(1 for s in bona if not s < t)
        out.append((t, acc_pa / len(pa), rej_bona / len(bona)))
    return out


def mp_threshold(scores):
    mpmath.mp.dps = 50
    xs = [mpmath.mpf(float(s)) for s in scores]
    mean = mpmath.fsum(xs) / len(xs)
    std = mpmath.sqrt(mpmath.fsum((x - mean) ** 2 for x in xs) / len(xs))
    return mean, std, mean + std


def test_threshold_examples():
    m = calibrate_threshold([0.5, 0.5])
    assert (m.mean, m.std, m.threshold) == (0.5, 0.0, 0.5)
    m = calibrate_threshold([0.1, 0.2, 0.3])
    assert m.mean == pytest.approx(0.2, abs=1e-15)
    assert m.std == pytest.approx(0.0816496580927726, abs=1e-12)
    assert m.threshold == pytest.approx(0.2816496580927726, abs=1e-12)
    scaled = calibrate_threshold([0.2, 0.4, 0.6])
    assert scaled.threshold == pytest.approx(2 * m.threshold, rel=1e-12)


def test_threshold_against_arbitrary_precision(rng):
    for _ in range(100):
        scores = rng.lognormal(-3, 1, int(rng.integers(2, 300)))
        model = calibrate_threshold(scores)
        mean, std, thr = mp_threshold(scores)
        assert abs(model.threshold - float(thr)) <= 1e-9 * abs(float(thr))
        assert model.std >= 0 and model.threshold >= model.mean


def test_threshold_needs_two_scores():
    with pytest.raises(InsufficientData):
        calibrate_threshold([0.3])


def test_decide_boundary_and_monotonicity():
    model = calibrate_threshold([0.1, 0.2, 0.3])
    assert decide(0.9 * model.threshold, model) == BONA_FIDE
    assert decide(model.threshold, model) == PA
    assert decide(model.threshold * 1.1, model) == PA
    above = ThresholdModel(1.0, 0.5, 0.5, ABOVE, 2)
    assert decide(0.5, above) == PA and decide(0.6, above) == BONA_FIDE


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_decide_monotone(s1, s2, thr):
    model = ThresholdModel(thr, 0.0, thr, BELOW, 2)
    lo, hi = min(s1, s2), max(s1, s2)
    if decide(hi, model) == BONA_FIDE:
        assert decide(lo, model) == BONA_FIDE


def test_rates_examples():
    recs = records_from([0] * 4, [PA] * 2 + [BONA_FIDE] * 2, [PA, PA, BONA_FIDE, BONA_FIDE])
    assert compute_rates(recs) == (0.0, 0.0, 0.0)
    recs = records_from([0] * 11, [PA] * 10 + [BONA_FIDE], [BONA_FIDE] + [PA] * 9 + [BONA_FIDE])
    assert compute_rates(recs)[0] == 0.1
    assert (0.109 + 0.2266) / 2 == pytest.approx(0.1678, abs=1e-12)


def test_rates_against_confusion_oracle(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        labels = [PA, BONA_FIDE] + [PA if b else BONA_FIDE for b in rng.random(n - 2) < 0.5]
        decisions = [PA if b else BONA_FIDE for b in rng.random(n) < 0.5]
        assert compute_rates(records_from([0.0] * n, labels, decisions)) == confusion_oracle(labels, decisions)


def test_missing_class():
    with pytest.raises(MissingClass):
        compute_rates(records_from([0.0], [BONA_FIDE], [PA]))
    with pytest.raises(MissingClass):
        compute_rates(records_from([0.0], [PA], [PA]))
    with pytest.raises(MissingClass):
        det_curve(records_from([0.1, 0.2], [PA, PA]))


def test_det_worked_example():
    recs = records_from([0.1, 0.2, 0.3, 0.4], [BONA_FIDE, BONA_FIDE, PA, PA])
    assert rates_at(recs, 0.25) == (0.0, 0.0)
    pts = det_curve(recs)
    assert pts[0] == (-math.inf, 0.0, 1.0)
    assert pts[-1] == (math.inf, 1.0, 0.0)


def test_det_against_brute_force(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding creates ties
        labels = [PA, BONA_FIDE] + [PA if b else BONA_FIDE for b in rng.random(n - 2) < 0.5]
        recs = records_from(scores.tolist(), labels)
        pts = det_curve(recs)
        bona = [s for s, lab in zip(scores, labels) if lab == BONA_FIDE]
        pa = [s for s, lab in zip(scores, labels) if lab == PA]
        taus = [-math.inf] + sorted(set(scores.tolist())) + [math.inf]
        assert pts == det_oracle(bona, pa, taus)
        a = [p[1] for p in pts]
        b = [p[2] for p in pts]
        assert all(x <= y for x, y in zip(a, a[1:])) and all(x >= y for x, y in zip(b, b[1:]))


def test_det_matches_decide_at_every_threshold(rng):
    scores = rng.random(30).tolist()
    labels = [PA, BONA_FIDE] * 15
    for tau, apcer, bpcer in det_curve(records_from(scores, labels))[1:-1]:
        model = ThresholdModel(tau, 0.0, tau, BELOW, 2)
        decided = records_from(scores, labels, [decide(s, model) for s in scores])
        assert compute_rates(decided)[:2] == (apcer, bpcer)


def test_calibration_provenance():
    good = [ScoreRecord("a", [0.1], 0.1, BONA_FIDE, split="train"), ScoreRecord("b", [0.3], 0.3, BONA_FIDE,
                                                                                 split="train")]
    assert calibrate_from_records(good).threshold == pytest.approx(0.3)
    with pytest.raises(ValueError):
        calibrate_from_records(good + [ScoreRecord("c", [0.2], 0.2, PA, split="val")])
    with pytest.raises(ValueError):
        calibrate_from_records(good + [ScoreRecord("d", [0.2], 0.2, BONA_FIDE, split="val")])


def test_threshold_json_roundtrip():
    m = calibrate_threshold([0.1, 0.25, 0.7])
    assert ThresholdModel.from_json(json.loads(json.dumps(m.to_json()))) == m


def test_score_image_is_patch_mean(tiny_corpus):
    ae = build_autoencoder(widths=SMALL_WIDTHS, seed=1)
    img = load_image(tiny_corpus.paths("val", PA)[0])
    rec = score_image(ae, img)
    assert len(rec.patch_errors) >= 1
    assert rec.image_score == pytest.approx(float(np.mean(rec.patch_errors)), rel=1e-12)
    assert score_image(ae, img) == rec
    single = np.ones((64, 64))
    single[10:50, 10:50] = 0.3
    one = score_image(ae, single)
    assert len(one.patch_errors) == 1 and one.image_score == one.patch_errors[0]


def test_evaluate_model_end_to_end(tiny_corpus, tmp_path):
    ae = build_autoencoder(widths=SMALL_WIDTHS, seed=1)
    model, calib = calibrate_model(ae, tiny_corpus)
    assert {r.true_label for r in calib} == {BONA_FIDE} and {r.split for r in calib} == {"train"}
    assert model.n == 8
    report = evaluate_model(ae, model, tiny_corpus, tmp_path)
    assert 0 <= report.apcer <= 1 and 0 <= report.bpcer <= 1
    assert report.acer == (report.apcer + report.bpcer) / 2
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert set(metrics) >= {"apcer", "bpcer", "acer", "threshold", "counts"}
    rows = list(csv.DictReader(open(tmp_path / "scores.csv")))
    assert len(rows) == 4 and set(rows[0]) == {"path", "label", "score", "decision"}
    back = read_scores(tmp_path / "scores.csv")
    assert [r.image_score for r in back] == [r.image_score for r in report.records]
    det = list(csv.DictReader(open(tmp_path / "det.csv")))
    assert len(det) == len(report.det_points)
    # order independence
    shuffled = list(reversed(report.records))
    assert compute_rates(shuffled) == (report.apcer, report.bpcer, report.acer)


def test_det_files(tmp_path):
    pts = det_curve(records_from([0.1, 0.2, 0.3, 0.4], [BONA_FIDE, PA, BONA_FIDE, PA]))
    write_det(pts, tmp_path / "det.csv")
    plot_det(pts, tmp_path / "det.png", (0.5, 0.5))
    assert (tmp_path / "det.png").stat().st_size > 0
    rows = list(csv.DictReader(open(tmp_path / "det.csv")))
    assert float(rows[0]["threshold"]) == -math.inf
