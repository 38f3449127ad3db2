"""Synthetic fingerprint corpora and the on-disk dataset layout.

Bona fide images are ridge patterns grown from white noise by repeated
oriented band-pass filtering along a smooth random orientation field, placed
on a near-white background. Presentation attacks are image-space
perturbations of such images. Real datasets use the same directory layout::

    root/{train,val}/{bona_fide,pa}/<name>.png
    root/index.json
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import fft, ndimage

from . import BONA_FIDE, PA
from .errors import DecodeError, InvalidParams, IoError, LayoutError
from .rng import RngStream

SPLITS = ("train", "val")
LABELS = (BONA_FIDE, PA)
ATTACK_KINDS = ("ridge_shift", "blob_occlusion", "contrast_flatten", "speckle_noise")
BACKGROUND = 1.0
MIN_BORDER = 4
_N_ORIENTATIONS = 8
_N_ITERATIONS = 3


@dataclass(frozen=True)
class SynthParams:
    ridge_frequency: float = 0.1
    orientation_smoothness: float = 1.0
    image_size: tuple[int, int] = (256, 256)
    noise_level: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.ridge_frequency < 0.5:
            raise InvalidParams(f"ridge_frequency must lie in (0, 0.5), got {self.ridge_frequency}")
        if not self.orientation_smoothness > 0:
            raise InvalidParams("orientation_smoothness must be positive")
        h, w = self.image_size
        if min(h, w) < 4 * MIN_BORDER:
            raise InvalidParams(f"image_size too small: {self.image_size}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise InvalidParams("noise_level must lie in [0, 1]")


@dataclass(frozen=True)
class AttackKind:
    kind: str
    magnitude: float = 0.5

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InvalidParams(f"unknown attack kind {self.kind!r}")
        if not 0.0 < self.magnitude <= 1.0:
            raise InvalidParams(f"attack magnitude must lie in (0, 1], got {self.magnitude}")


@dataclass(frozen=True)
class IndexEntry:
    path: str
    label: str
    split: str
    attack: str | None = None


@dataclass
class DatasetIndex:
    """Entries of a dataset, with paths relative to ``root``."""

    root: Path
    entries: list[IndexEntry] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise LayoutError(f"duplicate path in index: {e.path}")
            if e.label not in LABELS or e.split not in SPLITS:
                raise LayoutError(f"bad label/split for {e.path}: {e.label}/{e.split}")
            seen.add(e.path)

    @property
    def counts(self) -> dict[tuple[str, str], int]:
        counts = {(label, split): 0 for label in LABELS for split in SPLITS}
        for e in self.entries:
            counts[(e.label, e.split)] += 1
        return counts

    def select(self, split=None, label=None) -> list[IndexEntry]:
        return [
            e for e in self.entries
            if (split is None or e.split == split) and (label is None or e.label == label)
        ]

    def paths(self, split=None, label=None) -> list[Path]:
        return [self.root / e.path for e in self.select(split, label)]

    def to_json(self) -> dict:
        return {
            "entries": [asdict(e) for e in self.entries],
            "counts": {f"{split}/{label}": n for (label, split), n in self.counts.items()},
        }

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "index.json"
        try:
            path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise IoError(f"cannot write index {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, root) -> "DatasetIndex":
        root = Path(root)
        data = json.loads((root / "index.json").read_text())
        return cls(root, [IndexEntry(**e) for e in data["entries"]])


# --------------------------------------------------------------------------
# images on disk


def load_image(path) -> np.ndarray:
    """Decode an 8-bit grayscale image into float64 intensities in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError, SyntaxError) as exc:
        raise DecodeError(path, str(exc)) from exc
    return arr / 255.0


def save_image(img: np.ndarray, path) -> None:
    q = np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)
    try:
        Image.fromarray(q, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write image {path}: {exc}") from exc


def check_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or min(img.shape) < 1:
        raise InvalidParams(f"expected a non-empty 2-D image, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise InvalidParams("image intensities must lie in [0, 1]")
    return img


# --------------------------------------------------------------------------
# bona fide synthesis


def _orientation_field(shape, smoothness, rng: RngStream) -> np.ndarray:
    # Smooth in the doubled-angle domain so the field is continuous mod pi.
    sigma = smoothness * min(shape) / 8.0
    a = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    b = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return 0.5 * np.arctan2(b, a) % np.pi


def _filter_bank(shape, freq) -> np.ndarray:
    h, w = shape
    v = fft.fftfreq(h)[:, None]
    u = fft.rfftfreq(w)[None, :]
    radial_sd = 0.12 * freq
    angular_sd = 0.25 * freq
    bank = []
    for k in range(_N_ORIENTATIONS):
        phi = k * np.pi / _N_ORIENTATIONS
        along = u * np.cos(phi) + v * np.sin(phi)
        across = -u * np.sin(phi) + v * np.cos(phi)
        g = np.exp(-((np.abs(along) - freq) ** 2) / (2 * radial_sd**2) - across**2 / (2 * angular_sd**2))
        bank.append(g)
    return np.stack(bank)


def _oriented_filter(x, theta, bank) -> np.ndarray:
    spectrum = fft.rfft2(x)
    responses = fft.irfft2(spectrum[None] * bank, s=x.shape, axes=(-2, -1))
    # Linear blend of the two bank orientations nearest to the local angle.
    pos = theta / (np.pi / _N_ORIENTATIONS)
    lo = np.floor(pos).astype(int) % _N_ORIENTATIONS
    hi = (lo + 1) % _N_ORIENTATIONS
    t = pos - np.floor(pos)
    rows, cols = np.indices(x.shape)
    return (1 - t) * responses[lo, rows, cols] + t * responses[hi, rows, cols]


def _ellipse_mask(shape, rng: RngStream) -> np.ndarray:
    h, w = shape
    margin = MIN_BORDER + 2
    cy = h / 2 + rng.uniform(-0.03, 0.03) * h
    cx = w / 2 + rng.uniform(-0.03, 0.03) * w
    ay = min(cy, h - cy) - margin
    ax = min(cx, w - cx) - margin
    ay *= rng.uniform(0.85, 1.0)
    ax *= rng.uniform(0.75, 0.95)
    yy, xx = np.indices(shape, dtype=np.float64)
    r = np.sqrt(((yy + 0.5 - cy) / ay) ** 2 + ((xx + 0.5 - cx) / ax) ** 2)
    edge = 4.0 / min(ax, ay)
    return np.clip((1.0 - r) / edge, 0.0, 1.0)


def ridge_texture(shape, freq, smoothness, rng: RngStream) -> np.ndarray:
    """Zero-mean ridge texture in [-1, 1] with dominant spatial frequency ``freq``."""
    theta = _orientation_field(shape, smoothness, rng.split("orientation"))
    bank = _filter_bank(shape, freq)
    x = rng.split("seed_noise").normal(size=shape)
    for _ in range(_N_ITERATIONS):
        x = _oriented_filter(x, theta, bank)
        x = np.tanh(2.0 * x / (x.std() + 1e-12))
    return x


def generate_bona_fide(params: SynthParams) -> np.ndarray:
    params.validate()
    rng = RngStream(params.seed, ("bona_fide",))
    shape = tuple(int(s) for s in params.image_size)
    texture = ridge_texture(shape, params.ridge_frequency, params.orientation_smoothness, rng)
    foreground = 0.5 + 0.4 * texture
    if params.noise_level > 0:
        foreground = foreground + 0.2 * params.noise_level * rng.split("noise").normal(size=shape)
    mask = _ellipse_mask(shape, rng.split("mask"))
    img = mask * np.clip(foreground, 0.0, 1.0) + (1.0 - mask) * BACKGROUND
    return np.clip(img, 0.0, 1.0)


# --------------------------------------------------------------------------
# presentation attacks


def _foreground_box(img, threshold=0.95):
    rows = np.flatnonzero((img < threshold).any(axis=1))
    cols = np.flatnonzero((img < threshold).any(axis=0))
    if rows.size == 0:
        return 0, img.shape[0], 0, img.shape[1]
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def _ridge_shift(img, m, rng):
    scale = 1.0 + 0.5 * m
    r0, r1, c0, c1 = _foreground_box(img)
    center = np.array([(r0 + r1 - 1) / 2, (c0 + c1 - 1) / 2])
    center = center + rng.uniform(-2.0, 2.0, size=2)
    matrix = np.eye(2) / scale
    offset = center - matrix @ center
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="constant", cval=BACKGROUND)


def _blob_occlusion(img, m, rng):
    h, w = img.shape
    area = 0.2 * m * h * w
    aspect = rng.uniform(0.7, 1.4)
    ay = np.sqrt(area * aspect / np.pi)
    ax = area / (np.pi * ay)
    ay, ax = min(ay, h / 2 - 1), min(ax, w / 2 - 1)
    cy = rng.uniform(ay, h - ay)
    cx = rng.uniform(ax, w - ax)
    yy, xx = np.indices(img.shape, dtype=np.float64)
    inside = ((yy + 0.5 - cy) / ay) ** 2 + ((xx + 0.5 - cx) / ax) ** 2 <= 1.0
    smudge = 0.35 + 0.08 * ndimage.gaussian_filter(rng.normal(size=img.shape), 3.0) / 0.1
    out = img.copy()
    out[inside] = np.clip(smudge[inside], 0.05, 0.7)
    return out


def _contrast_flatten(img, m, rng):
    return 1.0 - (1.0 - 0.8 * m) * (1.0 - img)


def _speckle_noise(img, m, rng):
    r0, r1, c0, c1 = _foreground_box(img)
    grain = ndimage.gaussian_filter(rng.normal(size=img.shape), 0.7) / 0.4
    out = img.copy()
    box = (slice(r0, r1), slice(c0, c1))
    out[box] = img[box] * (1.0 + 0.6 * m * grain[box])
    return out


_ATTACKS = {
    "ridge_shift": _ridge_shift,
    "blob_occlusion": _blob_occlusion,
    "contrast_flatten": _contrast_flatten,
    "speckle_noise": _speckle_noise,
}


def apply_attack(img: np.ndarray, attack: AttackKind, seed: int) -> np.ndarray:
    """Perturb a bona fide image into a presentation-attack stand-in."""
    img = check_gray(img)
    rng = RngStream(seed, ("attack", attack.kind))
    out = _ATTACKS[attack.kind](img.astype(np.float64), attack.magnitude, rng)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# corpora


def _image_params(params: SynthParams, seed: int, jitter_rng: RngStream) -> SynthParams:
    freq = params.ridge_frequency * (1.0 + jitter_rng.uniform(-0.05, 0.05))
    return replace(params, ridge_frequency=float(freq), seed=seed)


def build_corpus(n_bona_train, n_bona_val, n_pa_val, params: SynthParams, attacks, seed, out_dir) -> DatasetIndex:
    """Write a synthetic corpus in the directory layout and return its index.

    ``attacks`` are cycled over the presentation-attack images.
    """
    for n in (n_bona_train, n_bona_val, n_pa_val):
        if n < 1:
            raise InvalidParams("corpus counts must be >= 1")
    if not attacks:
        raise InvalidParams("at least one attack kind is required")
    params.validate()
    root = Path(out_dir)
    try:
        for split in SPLITS:
            for label in LABELS:
                (root / split / label).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create corpus directories under {root}: {exc}") from exc

    master = RngStream(seed, ("corpus",))
    entries = []
    plan = [("train", BONA_FIDE, n_bona_train), ("val", BONA_FIDE, n_bona_val), ("val", PA, n_pa_val)]
    for split, label, n in plan:
        for i in range(n):
            stream = master.split(split, label, i)
            img_params = _image_params(params, int(stream.integers(0, 2**63 - 1)), stream.split("jitter"))
            img = generate_bona_fide(img_params)
            attack_name = None
            name = f"{split}_{label}_{i:05d}"
            if label == PA:
                attack = attacks[i % len(attacks)]
                attack_name = attack.kind
                img = apply_attack(img, attack, int(stream.integers(0, 2**63 - 1)))
                name = f"{name}_{attack.kind}"
            rel = f"{split}/{label}/{name}.png"
            save_image(img, root / rel)
            entries.append(IndexEntry(rel, label, split, attack_name))

    index = DatasetIndex(root, entries)
    index.save()
    return index


def scan_dataset(root, verify: bool = True) -> DatasetIndex:
    """Index every PNG under the layout; labels and splits come from the path."""
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"dataset root does not exist: {root}")
    entries = []
    for split in SPLITS:
        for label in LABELS:
            sub = root / split / label
            if not sub.is_dir():
                raise LayoutError(f"missing dataset directory: {sub}")
            for path in sorted(sub.iterdir()):
                if path.suffix.lower() != ".png":
                    continue
                if verify:
                    load_image(path)
                attack = None
                if label == PA:
                    stem = path.stem
                    attack = next((k for k in ATTACK_KINDS if stem.endswith(k)), None)
                entries.append(IndexEntry(path.relative_to(root).as_posix(), label, split, attack))
    return DatasetIndex(root, entries)
