"""Synthetic PET/CT cases with ellipsoidal primary tumour and lymph nodes.

The primary tumour (label 1) is very bright in PET with a mild positive CT
shift; nodes (label 2) are about half as bright in PET and slightly
hypodense on CT.  Both have sharp edges so the labels are recoverable from
the images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .volume import Volume


@dataclass
class SynthConfig:
    primary_radius: tuple = (0.12, 0.20)  # fraction of the smallest extent
    node_radius: tuple = (0.07, 0.11)
    max_nodes: int = 2
    pet_background: float = 1.0
    pet_primary: float = 6.0
    pet_node: float = 3.0
    ct_background: float = 30.0
    ct_primary: float = 40.0
    ct_node: float = -20.0
    pet_noise: float = 0.15
    ct_noise: float = 15.0


def _ellipsoid(shape, centre, radii, rot) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    rel = np.stack([g - c for g, c in zip(grids, centre)])
    local = np.einsum("ij,j...->i...", rot.T, rel)
    return np.sum((local / np.asarray(radii)[:, None, None, None]) ** 2, axis=0) <= 1.0


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def synth_case(seed: int, extents=(48, 48, 48), spacing=(1.0, 1.0, 1.0),
               cfg: SynthConfig | None = None) -> tuple[Volume, Volume, Volume]:
    """Return ``(ct, pet, mask)`` volumes on one shared grid, fully determined by ``seed``.

    ``extents`` is the array shape ``(D, H, W)``; ``spacing`` is in x, y, z order.
    """
    cfg = cfg or SynthConfig()
    shape = tuple(int(n) for n in extents)
    if len(shape) != 3 or min(shape) < 16:
        raise ConfigError(f"synthetic extents must be >= 16 per axis, got {extents}")
    rng = np.random.default_rng(seed)
    n_min = min(shape)

    mask = np.zeros(shape, dtype=np.uint8)
    r_p = rng.uniform(*cfg.primary_radius, 3) * n_min
    c_p = rng.uniform(0.35, 0.65, 3) * np.asarray(shape)
    mask[_ellipsoid(shape, c_p, r_p, _random_rotation(rng))] = 1

    n_nodes = int(rng.integers(0, cfg.max_nodes + 1))
    placed = []
    for _ in range(n_nodes):
        for _attempt in range(50):
            r_n = rng.uniform(*cfg.node_radius, 3) * n_min
            c_n = rng.uniform(0.2, 0.8, 3) * np.asarray(shape)
            clear = np.linalg.norm(c_n - c_p) > r_p.max() + r_n.max() + 2
            clear = clear and all(np.linalg.norm(c_n - c) > r + r_n.max() + 2 for c, r in placed)
            if clear:
                break
        else:
            continue
        rot = _random_rotation(rng)
        region = _ellipsoid(shape, c_n, r_n, rot) & (mask == 0)
        mask[region] = 2
        placed.append((c_n, r_n.max()))

    ct = (cfg.ct_background + 30.0 * _smooth_field(rng, shape, 4.0)
          + cfg.ct_noise * rng.standard_normal(shape))
    pet = (cfg.pet_background + 0.3 * _smooth_field(rng, shape, 4.0)
           + cfg.pet_noise * rng.standard_normal(shape))
    ct = ct + cfg.ct_primary * (mask == 1) + cfg.ct_node * (mask == 2)
    pet = pet + cfg.pet_primary * (mask == 1) + cfg.pet_node * (mask == 2)
    pet = np.maximum(pet, 0.0)

    kw = dict(origin=np.zeros(3), spacing=np.asarray(spacing, dtype=np.float64), direction=np.eye(3))
    return Volume(ct, kind="ct", **kw), Volume(pet, kind="pet", **kw), Volume(mask, kind="mask", **kw)
