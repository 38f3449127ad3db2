"""One-class decisions and ISO/IEC 30107-3 style error rates.

An image score is the mean of its patch scores. For autoencoders the score is
the reconstruction error and an image is bona fide iff its score is below
``mean + std`` of the bona fide training scores. For critics a higher score
means more bona fide, and the rule mirrors to ``score > mean - std``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import BONA_FIDE, PA
from .aetrain import patch_errors
from .errors import EmptyValSet, InsufficientData, MissingClass
from .models import to_tensor
from .preproc import DEFAULT_BACKGROUND_THRESHOLD, eval_patches
from .synthdata import DatasetIndex, load_image

BELOW = "below"  # bona fide iff score < threshold
ABOVE = "above"  # bona fide iff score > threshold


@dataclass
class ScoreRecord:
    image_path: str
    patch_errors: list[float]
    image_score: float
    true_label: str
    decision: str | None = None
    split: str | None = None


@dataclass(frozen=True)
class ThresholdModel:
    mean: float
    std: float
    threshold: float
    direction: str = BELOW
    n: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data) -> "ThresholdModel":
        return cls(**data)


@dataclass
class EvalReport:
    records: list[ScoreRecord]
    apcer: float
    bpcer: float
    acer: float
    det_points: list[tuple[float, float, float]] = field(default_factory=list)
    threshold: ThresholdModel | None = None

    @property
    def counts(self) -> dict:
        return {
            BONA_FIDE: sum(r.true_label == BONA_FIDE for r in self.records),
            PA: sum(r.true_label == PA for r in self.records),
        }

    def metrics(self) -> dict:
        return {
            "apcer": self.apcer,
            "bpcer": self.bpcer,
            "acer": self.acer,
            "threshold": None if self.threshold is None else self.threshold.to_json(),
            "counts": self.counts,
        }


def calibrate_threshold(train_scores, direction: str = BELOW) -> ThresholdModel:
    """Mean and population standard deviation of bona fide training scores.

    The threshold is ``mean + std`` for reconstruction errors and
    ``mean - std`` for critic scores (``direction="above"``).
    """
    scores = [float(s) for s in train_scores]
    n = len(scores)
    if n < 2:
        raise InsufficientData(f"need at least 2 calibration scores, got {n}")
    mean = math.fsum(scores) / n
    std = math.sqrt(math.fsum((s - mean) ** 2 for s in scores) / n)
    threshold = mean + std if direction == BELOW else mean - std
    return ThresholdModel(mean, std, threshold, direction, n)


def calibrate_from_records(records) -> ThresholdModel:
    """Calibrate from score records, refusing anything but bona fide training images."""
    for r in records:
        if r.true_label != BONA_FIDE or r.split not in (None, "train"):
            raise ValueError(f"calibration input {r.image_path} is not a bona fide training image")
    return calibrate_threshold([r.image_score for r in records])


def decide(score: float, model: ThresholdModel) -> str:
    if model.direction == BELOW:
        return BONA_FIDE if score < model.threshold else PA
    return BONA_FIDE if score > model.threshold else PA


def compute_rates(records) -> tuple[float, float, float]:
    """(APCER, BPCER, ACER) from records carrying decisions."""
    pa = [r for r in records if r.true_label == PA]
    bona = [r for r in records if r.true_label == BONA_FIDE]
    if not pa:
        raise MissingClass("no presentation attack samples: APCER undefined")
    if not bona:
        raise MissingClass("no bona fide samples: BPCER undefined")
    apcer = sum(r.decision == BONA_FIDE for r in pa) / len(pa)
    bpcer = sum(r.decision == PA for r in bona) / len(bona)
    return apcer, bpcer, (apcer + bpcer) / 2


def _split_scores(records):
    bona = np.array([r.image_score for r in records if r.true_label == BONA_FIDE], dtype=np.float64)
    pa = np.array([r.image_score for r in records if r.true_label == PA], dtype=np.float64)
    if bona.size == 0 or pa.size == 0:
        raise MissingClass("DET curve needs both bona fide and attack samples")
    return bona, pa


def rates_at(records, tau: float, direction: str = BELOW) -> tuple[float, float]:
    """(APCER, BPCER) when deciding with threshold ``tau``."""
    bona, pa = _split_scores(records)
    if direction == BELOW:
        return float(np.mean(pa < tau)), float(np.mean(bona >= tau))
    return float(np.mean(pa > tau)), float(np.mean(bona <= tau))


def det_curve(records, direction: str = BELOW) -> list[tuple[float, float, float]]:
    """(threshold, APCER, BPCER) at -inf, every distinct score, and +inf."""
    bona, pa = _split_scores(records)
    taus = np.concatenate(([-np.inf], np.unique(np.concatenate([bona, pa])), [np.inf]))
    bona_sorted, pa_sorted = np.sort(bona), np.sort(pa)
    # Integer counts first, one division each: rates equal count / n exactly.
    if direction == BELOW:
        apcer = np.searchsorted(pa_sorted, taus, side="left") / pa.size
        bpcer = (bona.size - np.searchsorted(bona_sorted, taus, side="left")) / bona.size
    else:
        apcer = (pa.size - np.searchsorted(pa_sorted, taus, side="right")) / pa.size
        bpcer = np.searchsorted(bona_sorted, taus, side="right") / bona.size
    return [(float(t), float(a), float(b)) for t, a, b in zip(taus, apcer, bpcer)]


# --------------------------------------------------------------------------
# scoring images


def _records(index: DatasetIndex, split, labels, patch_scorer, background_threshold):
    records = []
    for label in labels:
        for entry in index.select(split=split, label=label):
            patches = eval_patches(load_image(index.root / entry.path), background_threshold)
            scores = np.asarray(patch_scorer(patches), dtype=np.float64)
            records.append(ScoreRecord(entry.path, scores.tolist(), float(scores.mean()), label, split=split))
    return records


def score_image(ae, img, background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD, path: str = "",
                label: str | None = None) -> ScoreRecord:
    errors = patch_errors(ae, eval_patches(img, background_threshold))
    return ScoreRecord(path, errors.tolist(), float(errors.mean()), label)


def score_index(ae, index: DatasetIndex, split: str, labels=(BONA_FIDE, PA),
                background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD) -> list[ScoreRecord]:
    return _records(index, split, labels, lambda p: patch_errors(ae, p), background_threshold)


@torch.no_grad()
def critic_patch_scores(critic, patches, chunk: int = 256) -> np.ndarray:
    critic.eval()
    out = [critic(to_tensor(patches[s:s + chunk])).double().numpy() for s in range(0, len(patches), chunk)]
    return np.concatenate(out)


def score_index_with_critic(critic, index: DatasetIndex, split: str, labels=(BONA_FIDE, PA),
                            background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD) -> list[ScoreRecord]:
    return _records(index, split, labels, lambda p: critic_patch_scores(critic, p), background_threshold)


def calibrate_model(ae, index: DatasetIndex, background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD):
    """Threshold from the bona fide training images only (ROI + tiling, no augmentation)."""
    records = score_index(ae, index, "train", (BONA_FIDE,), background_threshold)
    return calibrate_from_records(records), records


def report_from_records(records, model: ThresholdModel) -> EvalReport:
    for r in records:
        r.decision = decide(r.image_score, model)
    apcer, bpcer, acer = compute_rates(records)
    return EvalReport(records, apcer, bpcer, acer, det_curve(records, model.direction), model)


def evaluate_model(ae, model: ThresholdModel, val_index: DatasetIndex, out_dir=None,
                   background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD) -> EvalReport:
    records = score_index(ae, val_index, "val", background_threshold=background_threshold)
    if not records:
        raise EmptyValSet("validation split is empty")
    report = report_from_records(records, model)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: EvalReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(report.metrics(), indent=2) + "\n")
    with open(out_dir / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "score", "decision"])
        for r in report.records:
            w.writerow([r.image_path, r.true_label, repr(r.image_score), r.decision])
    write_det(report.det_points, out_dir / "det.csv")


def write_det(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "apcer", "bpcer"])
        for t, a, b in points:
            w.writerow([repr(t), repr(a), repr(b)])


def read_scores(path) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        return [ScoreRecord(row["path"], [], float(row["score"]), row["label"], row.get("decision") or None)
                for row in csv.DictReader(fh)]


def plot_det(points, path, operating_point=None) -> None:
    """DET plot on normal-deviate axes."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from scipy.stats import norm

    eps = 1e-3
    a = np.clip([p[1] for p in points], eps, 1 - eps)
    b = np.clip([p[2] for p in points], eps, 1 - eps)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(norm.ppf(a), norm.ppf(b), drawstyle="steps-post")
    if operating_point is not None:
        oa, ob = np.clip(operating_point, eps, 1 - eps)
        ax.plot(norm.ppf(oa), norm.ppf(ob), "o")
    ticks = np.array([0.001, 0.01, 0.05, 0.2, 0.5, 0.8, 0.95, 0.99])
    ax.set_xticks(norm.ppf(ticks), [f"{100 * t:g}" for t in ticks])
    ax.set_yticks(norm.ppf(ticks), [f"{100 * t:g}" for t in ticks])
    ax.set_xlabel("APCER (%)")
    ax.set_ylabel("BPCER (%)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
