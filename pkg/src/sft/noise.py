"""Background noise fields and their application to WMNIST images.

Every generator returns a float64 field with values in [0, level]. The
free shape constants (grating period, Gaussian widths, line length) are
module-level defaults that callers may override per call.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("uniform", "grating", "mog", "squares", "rlines")
FAMILY_IDS = {name: i for i, name in enumerate(FAMILIES)}

GRATING_PERIOD = 8.0
MOG_COMPONENTS = 50
MOG_SIGMA_MAJOR = (4.0, 12.0)
MOG_SIGMA_MINOR = (2.0, 6.0)
SQUARES_GRID = 8
RLINES_COUNT = 100
RLINES_LENGTH = 7


@dataclass(frozen=True)
class NoiseSpec:
    family: str
    level: float
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; choose from {FAMILIES}")
        if self.level < 0:
            raise ValueError(f"noise level must be >= 0, got {self.level}")

    def field(self, shape=(64, 64), index: int = 0) -> np.ndarray:
        rng = noise_rng(self.seed, self.family, self.level, index)
        return GENERATORS[self.family](self.level, rng, shape, **self.params)


def noise_rng(seed: int, family: str, level: float, index: int) -> np.random.Generator:
    """Per-sample stream keyed by (seed, family, level, sample index)."""
    level_key = int(round(float(level) * 1000))
    return np.random.default_rng([seed, FAMILY_IDS[family], level_key, index])


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def gen_uniform(level, seed, shape=(64, 64)) -> np.ndarray:
    rng = _rng(seed)
    return rng.uniform(0.0, 1.0, size=shape) * level


def gen_grating(level, seed, shape=(64, 64), period: float = GRATING_PERIOD, center=None) -> np.ndarray:
    """Radial sinusoidal grating around a random pixel center."""
    rng = _rng(seed)
    h, w = shape
    if center is None:
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    else:
        cy, cx = center
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy - cy, xx - cx)
    return level * (0.5 + 0.5 * np.sin(2.0 * np.pi * r / period))


def gaussian_bump(shape, cy, cx, theta, sigma_major, sigma_minor) -> np.ndarray:
    """Unnormalized rotated Gaussian with its major axis at angle theta."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.exp(-0.5 * ((u / sigma_major) ** 2 + (v / sigma_minor) ** 2))


def gen_mog(level, seed, shape=(64, 64), k: int = MOG_COMPONENTS,
            sigma_major=MOG_SIGMA_MAJOR, sigma_minor=MOG_SIGMA_MINOR) -> np.ndarray:
    """Sum of k randomly placed and oriented Gaussians, min-max scaled to [0, level]."""
    rng = _rng(seed)
    h, w = shape
    cy = rng.uniform(0, h, size=k)
    cx = rng.uniform(0, w, size=k)
    theta = rng.uniform(0, np.pi, size=k)
    s_maj = rng.uniform(*sigma_major, size=k)
    s_min = rng.uniform(*sigma_minor, size=k)
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy[None] - cy[:, None, None]
    dx = xx[None] - cx[:, None, None]
    c, s = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    u = (c * dx + s * dy) / s_maj[:, None, None]
    v = (-s * dx + c * dy) / s_min[:, None, None]
    total = np.exp(-0.5 * (u * u + v * v)).sum(axis=0)
    lo, hi = total.min(), total.max()
    if hi <= lo:
        return np.zeros(shape)
    return level * (total - lo) / (hi - lo)


def gen_squares(level, seed, shape=(64, 64), grid: int = SQUARES_GRID) -> np.ndarray:
    """grid x grid constant blocks, each ~ U[0, level]."""
    h, w = shape
    if h % grid or w % grid:
        raise ValueError(f"shape {shape} not divisible by grid {grid}")
    rng = _rng(seed)
    blocks = rng.uniform(0.0, 1.0, size=(grid, grid)) * level
    return np.kron(blocks, np.ones((h // grid, w // grid)))


def raster_segment(cy, cx, theta, length: int = RLINES_LENGTH, shape=(64, 64)):
    """Pixels of a 1-px segment of ``length`` pixels centred on (cy, cx).

    Steps one pixel at a time along the dominant axis, so a segment
    never covers more than ``length`` pixels; pixels off the canvas are
    dropped.
    """
    h, w = shape
    dx, dy = np.cos(theta), np.sin(theta)
    t = np.arange(length) - (length - 1) / 2.0
    if abs(dx) >= abs(dy):
        xs = cx + t
        ys = cy + t * (dy / dx)
    else:
        ys = cy + t
        xs = cx + t * (dx / dy)
    xs = np.floor(xs + 0.5).astype(np.int64)
    ys = np.floor(ys + 0.5).astype(np.int64)
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    return ys[ok], xs[ok]


def gen_rlines(level, seed, shape=(64, 64), k: int = RLINES_COUNT, length: int = RLINES_LENGTH) -> np.ndarray:
    """k short segments at random pixel centres and orientations; covered pixels get ``level``."""
    rng = _rng(seed)
    h, w = shape
    cy = rng.integers(0, h, size=k)
    cx = rng.integers(0, w, size=k)
    theta = rng.uniform(0, np.pi, size=k)
    out = np.zeros(shape)
    for i in range(k):
        ys, xs = raster_segment(cy[i], cx[i], theta[i], length, shape)
        np.add.at(out, (ys, xs), level)
    return np.minimum(out, level)


GENERATORS = {
    "uniform": gen_uniform,
    "grating": gen_grating,
    "mog": gen_mog,
    "squares": gen_squares,
    "rlines": gen_rlines,
}


def apply_background_noise(image: np.ndarray, fg_mask: np.ndarray, noise_field: np.ndarray) -> np.ndarray:
    """clip(image + field outside the digit mask, 0, 255) as float32."""
    image = np.asarray(image)
    out = image.astype(np.float64) + np.where(fg_mask, 0.0, noise_field)
    out = np.clip(out, 0.0, 255.0).astype(np.float32)
    out[fg_mask] = image[fg_mask]
    return out


def perturb_batch(images: np.ndarray, masks: np.ndarray, spec: NoiseSpec | None, indices) -> np.ndarray:
    """Perturb a batch of u8 images; sample ``indices`` key the noise streams.

    Returns float32 pixel values in [0, 255] (no noise when spec is None or
    its level is 0).
    """
    out = np.asarray(images, dtype=np.float32).copy()
    if spec is None or spec.level == 0:
        return out
    for j, idx in enumerate(indices):
        out[j] = apply_background_noise(images[j], masks[j], spec.field(images.shape[1:], int(idx)))
    return out
