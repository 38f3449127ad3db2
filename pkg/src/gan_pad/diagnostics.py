"""Generator checks: sample grids, latent interpolation, diversity.

These turn visual inspection of generated patches into numbers. A diversity
ratio below ``COLLAPSE_RATIO`` flags mode collapse; an interpolation is
smooth when no step between consecutive frames exceeds twice the even
spacing of the endpoint distance, with ``SMOOTHNESS_SLACK`` relative slack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.distance import pdist

from .preproc import denormalize
from .synthdata import save_image

COLLAPSE_RATIO = 0.1
SMOOTHNESS_SLACK = 0.1


@dataclass
class DiversityScore:
    generated: float
    baseline: float
    ratio: float

    @property
    def collapsed(self) -> bool:
        return self.ratio < COLLAPSE_RATIO

    def to_json(self) -> dict:
        return {"generated": self.generated, "baseline": self.baseline, "ratio": self.ratio,
                "collapsed": self.collapsed}


@dataclass
class InterpolationTrace:
    z0: np.ndarray
    z1: np.ndarray
    steps: int
    frames: np.ndarray
    distances: np.ndarray
    endpoint_distance: float

    @property
    def bound(self) -> float:
        return 2.0 * self.endpoint_distance / (self.steps - 1) * (1.0 + SMOOTHNESS_SLACK)

    @property
    def smooth(self) -> bool:
        return bool(self.distances.max(initial=0.0) <= self.bound)

    def to_json(self) -> dict:
        return {"steps": self.steps, "distances": self.distances.tolist(),
                "endpoint_distance": self.endpoint_distance, "bound": self.bound, "smooth": self.smooth}


def _generate(gen, z: np.ndarray) -> np.ndarray:
    if isinstance(gen, torch.nn.Module):
        gen.eval()
    with torch.no_grad():
        out = gen(torch.as_tensor(z, dtype=torch.float32))
    out = out.detach().double().numpy() if torch.is_tensor(out) else np.asarray(out, dtype=np.float64)
    return out.reshape(len(z), *out.shape[1:])


def _latents(gen, n, seed) -> np.ndarray:
    dim = getattr(gen, "latent_dim", 100)
    return np.random.default_rng(seed).standard_normal((n, dim))


def sample_patches(gen, n: int, seed: int, grid_path=None) -> np.ndarray:
    """``n`` patches from standard-normal latents, shape ``(n, 64, 64)`` in [-1, 1]."""
    patches = _generate(gen, _latents(gen, n, seed)).reshape(n, 64, 64)
    if grid_path is not None:
        save_image(tile_grid(denormalize(patches)), grid_path)
    return patches


def tile_grid(images: np.ndarray, cols: int | None = None) -> np.ndarray:
    n, h, w = images.shape
    cols = cols or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    grid = np.ones((rows * h, cols * w))
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    return grid


def latent_interpolation(gen, z0, z1, steps: int, strip_path=None) -> InterpolationTrace:
    """Frames along the straight latent path from ``z0`` to ``z1``."""
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    t = (np.arange(steps) / (steps - 1))[:, None]
    zs = (1.0 - t) * z0[None] + t * z1[None]
    frames = _generate(gen, zs)
    flat = frames.reshape(steps, -1)
    distances = np.linalg.norm(np.diff(flat, axis=0), axis=1)
    endpoint = float(np.linalg.norm(flat[-1] - flat[0]))
    if strip_path is not None:
        save_image(tile_grid(denormalize(frames.reshape(steps, 64, 64)), cols=steps), strip_path)
    return InterpolationTrace(z0, z1, steps, frames, distances, endpoint)


def mean_pairwise_distance(patches) -> float:
    flat = np.asarray(patches, dtype=np.float64).reshape(len(patches), -1)
    if len(flat) < 2:
        return 0.0
    return float(pdist(flat).mean())


def diversity_ratio(generated, real) -> DiversityScore:
    g = mean_pairwise_distance(generated)
    b = mean_pairwise_distance(real)
    if b == 0.0:
        ratio = 0.0 if g == 0.0 else math.inf
    else:
        ratio = g / b
    return DiversityScore(g, b, ratio)


def mode_collapse_score(gen, n: int, seed: int, real_patches) -> DiversityScore:
    if n < 2:
        raise ValueError("need at least 2 generated patches")
    if len(real_patches) == 0:
        raise ValueError("real_patches must not be empty")
    generated = _generate(gen, _latents(gen, n, seed))
    return diversity_ratio(generated.reshape(n, -1), np.asarray(real_patches).reshape(len(real_patches), -1))
