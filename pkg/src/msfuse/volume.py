"""Volumes with physical geometry, the H3V file format and PET/CT preprocessing.

Geometry vectors (origin, spacing, size) are in physical x, y, z order while
voxel arrays are indexed ``[z, y, x]``, so ``size == voxels.shape[::-1]``.
The direction matrix holds the world direction of index axes i, j, k in its
columns.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (BadMagicError, CorruptFileError, DegenerateWarning, GeometryError,
                     TruncatedFileError, ValidationError, VolumeFormatError)

KINDS = ("ct", "pet", "mask", "prob")
H3V_MAGIC = b"H3V1"
CT_WINDOW = (-300.0, 300.0)
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _vec3(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise ValidationError(f"{name} must have 3 components, got {a.shape}")
    return a


@dataclass
class Volume:
    voxels: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))
    kind: str = "ct"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValidationError(f"voxels must be 3-D, got shape {self.voxels.shape}")
        self.voxels = self.voxels.astype(np.uint8 if self.kind == "mask" else np.float32, copy=False)
        self.origin = _vec3(self.origin, "origin")
        self.spacing = _vec3(self.spacing, "spacing")
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3, 3)
        self.validate()

    def validate(self) -> None:
        if not np.all(self.spacing > 0):
            raise ValidationError(f"spacing must be positive, got {self.spacing}")
        if not np.allclose(self.direction @ self.direction.T, np.eye(3), atol=1e-6):
            raise ValidationError("direction matrix is not orthonormal")
        if self.kind == "mask" and self.voxels.size and self.voxels.max() > 2:
            raise ValidationError(f"mask labels must be in {{0,1,2}}, found {int(self.voxels.max())}")

    @property
    def size(self) -> tuple:
        return tuple(int(n) for n in self.voxels.shape[::-1])

    @property
    def grid(self) -> "GridSpec":
        return GridSpec(self.origin.copy(), self.spacing.copy(), self.size)

    def with_voxels(self, voxels: np.ndarray, kind: str | None = None) -> "Volume":
        return Volume(voxels, self.origin.copy(), self.spacing.copy(), self.direction.copy(), kind or self.kind)


@dataclass
class GridSpec:
    origin: np.ndarray
    spacing: np.ndarray
    size: tuple

    def __post_init__(self):
        self.origin = _vec3(self.origin, "origin")
        self.spacing = _vec3(self.spacing, "spacing")
        self.size = tuple(int(n) for n in self.size)
        if len(self.size) != 3 or min(self.size) < 1:
            raise GeometryError(f"grid size must be three extents >= 1, got {self.size}")
        if not np.all(self.spacing > 0):
            raise GeometryError(f"grid spacing must be positive, got {self.spacing}")

    @property
    def last(self) -> np.ndarray:
        """Physical position of the last voxel centre."""
        return self.origin + self.spacing * (np.asarray(self.size) - 1)

    @property
    def shape(self) -> tuple:
        return self.size[::-1]

    def same_as(self, other: "GridSpec", atol: float = 1e-6) -> bool:
        return (self.size == other.size and np.allclose(self.origin, other.origin, atol=atol)
                and np.allclose(self.spacing, other.spacing, atol=atol))


# ---------------------------------------------------------------- H3V files

def _header(v: Volume) -> bytes:
    # key order and separators are fixed so equal volumes give equal bytes
    head = {
        "size": list(v.size),
        "spacing": [float(s) for s in v.spacing],
        "origin": [float(o) for o in v.origin],
        "direction": [float(d) for d in v.direction.reshape(-1)],
        "dtype": "u8" if v.kind == "mask" else "f32",
        "kind": v.kind,
    }
    return json.dumps(head, separators=(",", ":")).encode("utf-8")


def volume_bytes(v: Volume) -> bytes:
    head = _header(v)
    dtype = _DTYPES["u8" if v.kind == "mask" else "f32"]
    payload = np.ascontiguousarray(v.voxels, dtype=dtype).tobytes()
    return H3V_MAGIC + struct.pack("<I", len(head)) + head + payload


def write_volume(v: Volume, path) -> None:
    Path(path).write_bytes(volume_bytes(v))


def parse_volume(buf: bytes, source: str = "<bytes>") -> Volume:
    if len(buf) < 4 or buf[:4] != H3V_MAGIC:
        raise BadMagicError(f"{source}: not an H3V1 file")
    if len(buf) < 8:
        raise TruncatedFileError(f"{source}: truncated before header length")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + hlen:
        raise TruncatedFileError(f"{source}: header declares {hlen} bytes, file ends early")
    try:
        head = json.loads(buf[8:8 + hlen].decode("utf-8"))
        size = [int(n) for n in head["size"]]
        dtype = _DTYPES[head["dtype"]]
        kind = head["kind"]
        spacing, origin, direction = head["spacing"], head["origin"], head["direction"]
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"{source}: malformed header: {exc}") from exc
    if len(size) != 3 or len(direction) != 9:
        raise VolumeFormatError(f"{source}: size needs 3 and direction 9 entries")
    if (kind == "mask") != (head["dtype"] == "u8"):
        raise ValidationError(f"{source}: kind {kind!r} does not match dtype {head['dtype']!r}")
    expected = int(np.prod(size)) * dtype.itemsize
    payload = buf[8 + hlen:]
    if len(payload) != expected:
        raise CorruptFileError(f"{source}: header implies {expected} payload bytes, found {len(payload)}")
    voxels = np.frombuffer(payload, dtype=dtype).reshape(size[::-1]).copy()
    return Volume(voxels, origin, spacing, np.asarray(direction).reshape(3, 3), kind)


def read_volume(path, canonical: bool = False) -> Volume:
    """Read an H3V file; ``canonical=True`` also reorients it to identity direction."""
    v = parse_volume(Path(path).read_bytes(), str(path))
    return canonicalize(v) if canonical else v


# ---------------------------------------------------------------- geometry

def canonicalize(v: Volume) -> Volume:
    """Permute and flip axes so the direction becomes the identity.

    Only signed permutation directions are accepted; oblique volumes raise.
    """
    d = v.direction
    perm = np.argmax(np.abs(d), axis=0)  # world axis of each index axis
    signs = np.sign(d[perm, range(3)])
    if sorted(perm) != [0, 1, 2] or not np.allclose(np.abs(d[perm, range(3)]), 1.0, atol=1e-6):
        raise GeometryError("oblique direction matrices are not supported")
    if np.array_equal(perm, [0, 1, 2]) and np.all(signs > 0):
        return v
    arr = v.voxels.transpose(2, 1, 0)  # now indexed [i, j, k]
    corner = np.zeros(3)
    for n in range(3):
        if signs[n] < 0:
            arr = np.flip(arr, axis=n)
            corner[n] = arr.shape[n] - 1
    inv = np.argsort(perm)  # index axis feeding each world axis
    arr = arr.transpose(inv)
    origin = v.origin + d @ (v.spacing * corner)
    spacing = v.spacing[inv]
    return Volume(np.ascontiguousarray(arr.transpose(2, 1, 0)), origin, spacing, np.eye(3), v.kind)


def _require_identity(v: Volume, name: str) -> None:
    if not np.allclose(v.direction, np.eye(3), atol=1e-6):
        raise GeometryError(f"{name} must be canonicalized to identity direction first")


def common_grid(ct: Volume, pet: Volume) -> GridSpec:
    """Physical intersection of both volumes on an isotropic grid.

    The origin is the componentwise max of the two origins and the grid ends
    at the smaller of the two last voxel centres.  Spacing is the coarsest
    spacing of either input on every axis.
    """
    _require_identity(ct, "ct")
    _require_identity(pet, "pet")
    lo = np.maximum(ct.origin, pet.origin)
    hi = np.minimum(ct.grid.last, pet.grid.last)
    if np.any(hi < lo - 1e-9):
        raise GeometryError(f"CT and PET extents do not overlap (lo={lo}, hi={hi})")
    step = float(max(ct.spacing.max(), pet.spacing.max()))
    size = np.floor((hi - lo) / step + 1e-9).astype(int) + 1
    return GridSpec(lo, np.full(3, step), tuple(size))


def resample(v: Volume, g: GridSpec) -> Volume:
    """Sample ``v`` on ``g``: trilinear for intensities, nearest for masks, edge-clamped."""
    _require_identity(v, v.kind)
    axes = [g.origin[n] + g.spacing[n] * np.arange(g.size[n]) for n in range(3)]
    # continuous index along each array axis (z, y, x)
    idx = [(axes[n] - v.origin[n]) / v.spacing[n] for n in (2, 1, 0)]
    coords = np.stack(np.meshgrid(*idx, indexing="ij"))
    order = 0 if v.kind == "mask" else 1
    data = v.voxels if v.kind == "mask" else v.voxels.astype(np.float64)
    out = ndimage.map_coordinates(data, coords, order=order, mode="nearest", prefilter=False)
    return Volume(out, g.origin.copy(), g.spacing.copy(), np.eye(3), v.kind)


# ---------------------------------------------------------------- intensities

def _require_kind(v: Volume, kind: str) -> None:
    if v.kind != kind:
        raise ValidationError(f"expected a {kind} volume, got {v.kind}")


def clip_and_scale_ct(v: Volume) -> Volume:
    """Clamp HU to [-300, 300] and map linearly onto [0, 1] with the fixed window."""
    _require_kind(v, "ct")
    lo, hi = CT_WINDOW
    x = (np.clip(v.voxels.astype(np.float64), lo, hi) - lo) / (hi - lo)
    return v.with_voxels(x)


def scale_pet(v: Volume) -> Volume:
    """Per-volume min-max scaling to [0, 1]; a constant volume maps to zeros with a warning."""
    _require_kind(v, "pet")
    x = v.voxels.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        warnings.warn("PET volume is constant; emitting zeros", DegenerateWarning, stacklevel=2)
        return v.with_voxels(np.zeros_like(x))
    return v.with_voxels((x - lo) / (hi - lo))


def stack_channels(ct: Volume, pet: Volume) -> np.ndarray:
    """Network input ``(2, D, H, W)``: channel 0 CT, channel 1 PET."""
    if not ct.grid.same_as(pet.grid) or not np.allclose(ct.direction, pet.direction):
        raise GeometryError("CT and PET must share a grid before stacking")
    return np.stack([ct.voxels, pet.voxels]).astype(np.float32)


@dataclass
class Preprocessed:
    image: np.ndarray
    mask: np.ndarray | None
    grid: GridSpec


def preprocess_pair(ct: Volume, pet: Volume, mask: Volume | None = None) -> Preprocessed:
    """Canonicalize, align on the common grid, rescale intensities and stack.

    The mask, if given, is resampled with nearest neighbour onto the same grid.
    """
    ct, pet = canonicalize(ct), canonicalize(pet)
    g = common_grid(ct, pet)
    ct_r = clip_and_scale_ct(resample(ct, g))
    pet_r = scale_pet(resample(pet, g))
    m = None
    if mask is not None:
        m = resample(canonicalize(mask), g).voxels
    return Preprocessed(stack_channels(ct_r, pet_r), m, g)
