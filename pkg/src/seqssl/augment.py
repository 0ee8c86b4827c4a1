"""Flip, rotation and elastic augmentations and contrastive view pairs.

Only geometric transforms are used so slice intensities are never rescaled.
Every transform takes an explicit ``numpy.random.Generator``; the full chain is
a pure function of (pixels, config, seed).

Random draws per image, in order: two uniforms for the flips, one rotation
angle, then a ``(2, H, W)`` uniform field for the elastic displacement. The
batched path (``augment_batch``) makes the same draws from per-image
generators, so it reproduces ``augment`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import require

# Resolution at which the elastic defaults are stated.
REFERENCE_RESOLUTION = 84

_MASK64 = (1 << 64) - 1


@dataclass
class AugmentConfig:
    p_flip_h: float = 0.5
    p_flip_v: float = 0.5
    rotation_range_deg: tuple[float, float] = (-15.0, 15.0)
    elastic_alpha: float = 10.0
    elastic_sigma: float = 4.0
    seed: int = 0

    def validate(self) -> "AugmentConfig":
        for name in ("p_flip_h", "p_flip_v"):
            p = getattr(self, name)
            require(0.0 <= p <= 1.0, f"must lie in [0, 1], got {p}", f"augment.{name}")
        lo, hi = self.rotation_range_deg
        require(lo <= hi, f"lower bound {lo} exceeds upper bound {hi}", "augment.rotation_range_deg")
        require(self.elastic_alpha >= 0, "must be >= 0", "augment.elastic_alpha")
        require(self.elastic_sigma > 0, "must be > 0", "augment.elastic_sigma")
        return self

    def scaled_to(self, resolution: int) -> "AugmentConfig":
        """Elastic magnitudes scaled in proportion to the slice size."""
        s = resolution / REFERENCE_RESOLUTION
        d = asdict(self)
        d.update(elastic_alpha=self.elastic_alpha * s, elastic_sigma=self.elastic_sigma * s)
        return AugmentConfig(**d)

    @classmethod
    def degenerate(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, (0.0, 0.0), 0.0, 1.0)


@dataclass
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    source: str


# --------------------------------------------------------------------------
# sampling


def bilinear_sample(images: np.ndarray, ys: np.ndarray, xs: np.ndarray, mode: str) -> np.ndarray:
    """Sample ``images`` (B, H, W) at float coordinates (B, H', W').

    ``mode="zero"`` treats pixels outside the grid as 0; ``mode="edge"``
    clamps coordinates to the grid (border replication). Integer coordinates
    reproduce the input exactly.
    """
    b, h, w = images.shape
    if mode == "edge":
        ys = np.clip(ys, 0.0, h - 1.0)
        xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy, wx = ys - y0, xs - x0
    y0, x0 = y0.astype(np.int64), x0.astype(np.int64)
    bi = np.arange(b).reshape(b, *([1] * (ys.ndim - 1)))

    def gather(yi, xi):
        v = images[bi, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        if mode == "zero":
            v = np.where((yi >= 0) & (yi < h) & (xi >= 0) & (xi < w), v, 0.0)
        return v

    return ((1 - wy) * ((1 - wx) * gather(y0, x0) + wx * gather(y0, x0 + 1))
            + wy * ((1 - wx) * gather(y0 + 1, x0) + wx * gather(y0 + 1, x0 + 1)))


def _grid(h: int, w: int):
    return np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")


def _rotate_batch(images: np.ndarray, angles_deg: np.ndarray) -> np.ndarray:
    b, h, w = images.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = _grid(h, w)
    t = np.radians(angles_deg).reshape(b, 1, 1)
    c, s = np.cos(t), np.sin(t)
    dy, dx = yy - cy, xx - cx
    out = bilinear_sample(images, cy + c * dy - s * dx, cx + s * dy + c * dx, "zero")
    still = angles_deg == 0.0
    out[still] = images[still]
    return out


def _smooth(raw: np.ndarray, sigma: float) -> np.ndarray:
    # truncated, normalized gaussian with zero padding: |output| <= max|input|
    sig = (0.0,) * (raw.ndim - 2) + (sigma, sigma)
    return ndimage.gaussian_filter(raw, sig, mode="constant", cval=0.0)


def _elastic_batch(images: np.ndarray, raw: np.ndarray, alpha: float, sigma: float) -> np.ndarray:
    if alpha == 0.0:
        return images.copy()
    disp = alpha * _smooth(raw, sigma)
    yy, xx = _grid(*images.shape[1:])
    return bilinear_sample(images, yy + disp[:, 0], xx + disp[:, 1], "edge")


# --------------------------------------------------------------------------
# single-image transforms


def flip_h(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1].copy()


def flip_v(pixels: np.ndarray) -> np.ndarray:
    return pixels[::-1, :].copy()


def random_flip(pixels: np.ndarray, rng: np.random.Generator, p_h: float = 0.5, p_v: float = 0.5) -> np.ndarray:
    # both draws always happen so the stream position does not depend on outcomes
    do_h, do_v = rng.random(2) < (p_h, p_v)
    out = pixels[:, ::-1] if do_h else pixels
    out = out[::-1, :] if do_v else out
    return np.array(out, copy=True)


def rotate(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image centre, bilinear sampling, zero outside the image."""
    px = np.asarray(pixels, dtype=np.float64)[None]
    return _rotate_batch(px, np.array([float(angle_deg)]))[0]


def random_rotation(pixels: np.ndarray, rng: np.random.Generator,
                    angle_range: Sequence[float] = (-15.0, 15.0)) -> np.ndarray:
    return rotate(pixels, rng.uniform(angle_range[0], angle_range[1]))


def displacement_field(shape, rng: np.random.Generator, alpha: float, sigma: float) -> np.ndarray:
    """Smoothed uniform noise ``(2, H, W)``; each component is bounded by ``alpha``."""
    return alpha * _smooth(rng.uniform(-1.0, 1.0, size=(2, *shape)), sigma)


def elastic_deform(pixels: np.ndarray, rng: np.random.Generator, alpha: float = 10.0,
                   sigma: float = 4.0) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64)
    raw = rng.uniform(-1.0, 1.0, size=(1, 2, *px.shape))
    return _elastic_batch(px[None], raw, alpha, sigma)[0]


# --------------------------------------------------------------------------
# chains


def augment(pixels: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Flip, then rotation, then elastic deformation."""
    return augment_batch(np.asarray(pixels)[None], config, [rng])[0]


def augment_batch(images: np.ndarray, config: AugmentConfig, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    b, h, w = images.shape
    flips = np.empty((b, 2), dtype=bool)
    angles = np.empty(b)
    raw = np.empty((b, 2, h, w))
    lo, hi = config.rotation_range_deg
    for i, rng in enumerate(rngs):
        flips[i] = rng.random(2) < (config.p_flip_h, config.p_flip_v)
        angles[i] = rng.uniform(lo, hi)
        raw[i] = rng.uniform(-1.0, 1.0, size=(2, h, w))
    out = images.copy()
    out[flips[:, 0]] = out[flips[:, 0]][:, :, ::-1]
    out[flips[:, 1]] = out[flips[:, 1]][:, ::-1, :]
    out = _rotate_batch(out, angles)
    return _elastic_batch(out, raw, config.elastic_alpha, config.elastic_sigma)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def view_seed(pair_seed: int, view: int) -> int:
    """Sub-seed of view 0 or 1: ``splitmix64(splitmix64(pair_seed) ^ view)``."""
    return splitmix64(splitmix64(int(pair_seed) & _MASK64) ^ int(view))


def make_view_pair(slice_, config: AugmentConfig, pair_seed: int) -> ViewPair:
    """Two independently augmented views of a slice (a SliceRecord or a 2D array)."""
    pixels = getattr(slice_, "pixels", slice_)
    source = getattr(slice_, "locator", "")
    a = augment(pixels, config, np.random.default_rng(view_seed(pair_seed, 0)))
    b = augment(pixels, config, np.random.default_rng(view_seed(pair_seed, 1)))
    return ViewPair(a, b, source)


def make_view_batch(images: np.ndarray, config: AugmentConfig, pair_seeds: Sequence[int]):
    """Views ``(a, b)`` for a batch; row ``i`` equals ``make_view_pair(images[i], config, pair_seeds[i])``."""
    a = augment_batch(images, config, [np.random.default_rng(view_seed(s, 0)) for s in pair_seeds])
    b = augment_batch(images, config, [np.random.default_rng(view_seed(s, 1)) for s in pair_seeds])
    return a, b
