"""Image preprocessing: ROI extraction, augmentation, cropping and tiling.

Training samples go through ROI -> random augmentation -> random 64x64 crop.
Evaluation images go through ROI -> non-overlapping 64x64 tiles. Patches are
normalized from [0, 1] intensities to [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import BONA_FIDE
from .errors import EmptyImage, InvalidParams, TooSmall
from .rng import RngStream
from .synthdata import BACKGROUND, DatasetIndex, load_image

PATCH_SIZE = 64
DEFAULT_BACKGROUND_THRESHOLD = 0.95


@dataclass(frozen=True)
class AugmentConfig:
    flip_probability: float = 0.5
    rotation_range_deg: tuple[float, float] = (-20.0, 20.0)
    brightness_range: tuple[float, float] = (0.75, 1.25)

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise InvalidParams("flip_probability must lie in [0, 1]")
        for name in ("rotation_range_deg", "brightness_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidParams(f"{name}: min {lo} exceeds max {hi}")


def normalize(x):
    return 2.0 * x - 1.0


def denormalize(p):
    return (p + 1.0) / 2.0


def extract_roi(img: np.ndarray, background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD) -> np.ndarray:
    """Trim the empty rows and columns surrounding the fingerprint.

    Returns the smallest crop holding every pixel darker than
    ``background_threshold``.
    """
    if not 0.0 < background_threshold <= 1.0:
        raise InvalidParams("background_threshold must lie in (0, 1]")
    dark = np.asarray(img) < background_threshold
    rows = np.flatnonzero(dark.any(axis=1))
    if rows.size == 0:
        raise EmptyImage("no pixel below the background threshold")
    cols = np.flatnonzero(dark.any(axis=0))
    return img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def pad_to_patch(img: np.ndarray, size: int = PATCH_SIZE, fill: float = BACKGROUND) -> np.ndarray:
    """Center ``img`` on a background canvas at least ``size`` in each dimension."""
    h, w = img.shape
    if h >= size and w >= size:
        return img
    ph, pw = max(size - h, 0), max(size - w, 0)
    pad = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
    return np.pad(img, pad, mode="constant", constant_values=fill)


def apply_augmentation(img: np.ndarray, flip: bool, angle: float, factor: float) -> np.ndarray:
    out = img[:, ::-1] if flip else img
    if angle != 0.0:
        out = ndimage.rotate(out, angle, reshape=False, order=1, mode="constant", cval=BACKGROUND)
    if factor != 1.0:
        out = np.clip(out * factor, 0.0, 1.0)
    return np.array(out, copy=True)


def draw_augmentation(cfg: AugmentConfig, rng: RngStream) -> tuple[bool, float, float]:
    # Draw order is part of the reproducibility contract: flip, angle, factor.
    flip = bool(rng.random() < cfg.flip_probability)
    angle = float(rng.uniform(*cfg.rotation_range_deg))
    factor = float(rng.uniform(*cfg.brightness_range))
    return flip, angle, factor


def augment(img: np.ndarray, cfg: AugmentConfig, rng: RngStream) -> np.ndarray:
    """Random left-right mirror, rotation about the center, and brightness scaling."""
    return apply_augmentation(img, *draw_augmentation(cfg, rng))


def random_crop(img: np.ndarray, rng: RngStream, size: int = PATCH_SIZE) -> np.ndarray:
    h, w = img.shape
    if h < size or w < size:
        raise TooSmall(f"image {h}x{w} is smaller than {size}x{size}")
    r = int(rng.integers(0, h - size + 1))
    c = int(rng.integers(0, w - size + 1))
    return normalize(img[r:r + size, c:c + size]).astype(np.float32)


def tile_patches(img: np.ndarray, size: int = PATCH_SIZE) -> np.ndarray:
    """Non-overlapping row-major tiles from the top-left, shape ``(n, size, size)``.

    Residual borders narrower than ``size`` are discarded.
    """
    img = pad_to_patch(img, size)
    nr, nc = img.shape[0] // size, img.shape[1] // size
    tiles = img[:nr * size, :nc * size].reshape(nr, size, nc, size).swapaxes(1, 2)
    return normalize(tiles.reshape(nr * nc, size, size)).astype(np.float32)


def eval_patches(img: np.ndarray, background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD) -> np.ndarray:
    return tile_patches(extract_roi(img, background_threshold))


class TrainStream:
    """Infinite stream of augmented training batches, shape ``(B, 64, 64, 1)``.

    Images are visited in a fresh permutation each epoch. Sample ``k`` draws
    its augmentation and crop from its own substream, so the batch sequence
    depends only on ``seed``.
    """

    def __init__(self, index: DatasetIndex, cfg: AugmentConfig | None = None, batch_size: int = 64,
                 seed: int = 0, background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD):
        entries = index.select(split="train")
        if not entries:
            raise InvalidParams("training split is empty")
        if any(e.label != BONA_FIDE for e in entries):
            raise InvalidParams("training split must contain bona fide images only")
        if batch_size < 1:
            raise InvalidParams("batch_size must be positive")
        self.paths = [index.root / e.path for e in entries]
        self.cfg = cfg or AugmentConfig()
        self.batch_size = batch_size
        self.seed = seed
        self.background_threshold = background_threshold
        self._rng = RngStream(seed, ("train_stream",))
        self._cache: dict = {}

    def __len__(self):
        return len(self.paths)

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.paths) / self.batch_size)

    def roi(self, path) -> np.ndarray:
        if path not in self._cache:
            img = extract_roi(load_image(path), self.background_threshold)
            self._cache[path] = pad_to_patch(img)
        return self._cache[path]

    def iter_paths(self):
        epoch = 0
        while True:
            for i in self._rng.split("shuffle", epoch).permutation(len(self.paths)):
                yield self.paths[i]
            epoch += 1

    def sample(self, path, k: int) -> np.ndarray:
        rng = self._rng.split("sample", k)
        img = pad_to_patch(augment(self.roi(path), self.cfg, rng))
        return random_crop(img, rng)

    def __iter__(self):
        paths = self.iter_paths()
        k = 0
        while True:
            batch = np.empty((self.batch_size, PATCH_SIZE, PATCH_SIZE, 1), dtype=np.float32)
            for b in range(self.batch_size):
                batch[b, :, :, 0] = self.sample(next(paths), k)
                k += 1
            yield batch
