"""Seeded training-time augmentation: crop, affine, elastic warp and noise.

All random draws happen in a fixed order whatever the configuration, so two
configs that differ only in amplitudes consume the RNG identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError


@dataclass
class AugmentConfig:
    patch: tuple = (64, 64, 64)
    rotation_deg: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    elastic_grid: int = 4
    elastic_amplitude: float = 2.0
    noise_sigma: float = 0.05

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if len(self.patch) != 3 or any(p < 8 or p % 8 for p in self.patch):
            raise ConfigError(f"patch {self.patch} must be three positive multiples of 8")
        if self.rotation_deg < 0 or self.elastic_amplitude < 0 or self.noise_sigma < 0:
            raise ConfigError("augmentation amplitudes must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.elastic_grid < 2:
            raise ConfigError("elastic_grid must be >= 2")

    @classmethod
    def identity(cls, patch) -> "AugmentConfig":
        return cls(patch=patch, rotation_deg=0.0, scale_range=(1.0, 1.0),
                   elastic_amplitude=0.0, noise_sigma=0.0)


def rotation_matrix(angles) -> np.ndarray:
    """Rotation about the three array axes in turn; angles in radians."""
    mats = []
    for axis, t in enumerate(angles):
        c, s = np.cos(t), np.sin(t)
        r = np.eye(3)
        i, j = [n for n in range(3) if n != axis]
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        mats.append(r)
    return mats[2] @ mats[1] @ mats[0]


def _elastic_field(coarse: np.ndarray, patch) -> np.ndarray:
    """Trilinearly upsample a ``(3, n, n, n)`` displacement grid to the patch, corners aligned."""
    n = coarse.shape[1]
    axes = [np.linspace(0.0, n - 1.0, p) for p in patch]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"))
    return np.stack([ndimage.map_coordinates(c, pts, order=1, mode="nearest") for c in coarse])


def augment(x: np.ndarray, m: np.ndarray, cfg: AugmentConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random patch of ``(x, m)``; the same warp goes to image (trilinear) and mask (nearest).

    Noise is added to the image channels only and is not clipped.
    """
    x = np.asarray(x)
    m = np.asarray(m)
    if x.ndim != 4 or m.shape != x.shape[1:]:
        raise DimensionError(f"image {x.shape} and mask {m.shape} do not pair up")
    ext = x.shape[1:]
    patch = cfg.patch
    if any(p > n for p, n in zip(patch, ext)):
        raise ConfigError(f"patch {patch} larger than volume {ext}")
    rng = np.random.default_rng(seed)
    start = np.array([rng.integers(0, n - p + 1) for n, p in zip(ext, patch)], dtype=np.float64)
    angles = np.deg2rad(rng.uniform(-1.0, 1.0, 3) * cfg.rotation_deg)
    zoom = rng.uniform(*cfg.scale_range) if cfg.scale_range[1] > cfg.scale_range[0] else cfg.scale_range[0]
    coarse = rng.uniform(-1.0, 1.0, (3,) + (cfg.elastic_grid,) * 3) * cfg.elastic_amplitude
    noise_seed = rng.integers(0, 2**63)

    grid = np.stack(np.meshgrid(*[np.arange(p, dtype=np.float64) for p in patch], indexing="ij"))
    centre = (np.asarray(patch, dtype=np.float64) - 1.0) / 2.0
    rel = grid - centre[:, None, None, None]
    a = rotation_matrix(angles) / zoom
    coords = np.einsum("ij,j...->i...", a, rel) + (centre + start)[:, None, None, None]
    if cfg.elastic_amplitude > 0:
        coords += _elastic_field(coarse, patch)

    xo = np.stack([ndimage.map_coordinates(c.astype(np.float64), coords, order=1, mode="nearest",
                                           prefilter=False) for c in x]).astype(np.float32)
    mo = ndimage.map_coordinates(m, coords, order=0, mode="nearest", prefilter=False).astype(m.dtype)
    if cfg.noise_sigma > 0:
        noise = np.random.default_rng(noise_seed).normal(0.0, cfg.noise_sigma, xo.shape)
        xo = (xo + noise).astype(np.float32)
    return xo, mo
