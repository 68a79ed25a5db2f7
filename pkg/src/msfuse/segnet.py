"""Full segmentation models, whole-volume inference and checkpoint files."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .dense import DenseMsfBlock, DenseMsfConfig
from .encoder import NUM_SCALES, Encoder, stream_widths
from .errors import BadMagicError, ConfigError, CorruptFileError, DimensionError, TruncatedFileError
from .focal import FocalFuseBlock, FocalFuseConfig
from .nn import Conv3d, Linear, Module
from .tensor import Tensor, no_grad

VARIANTS = ("focal", "msf")
CKPT_MAGIC = b"H3CK"


@dataclass
class ModelConfig:
    variant: str = "focal"
    base_filters: int = 16
    focal: FocalFuseConfig = field(default_factory=FocalFuseConfig)
    dense: DenseMsfConfig = field(default_factory=DenseMsfConfig)
    patch: tuple = (64, 64, 64)
    seed: int = 0
    cross_scale: bool = True  # False zeroes and freezes every cross-stream projection

    def __post_init__(self):
        if isinstance(self.focal, dict):
            self.focal = FocalFuseConfig(**self.focal)
        if isinstance(self.dense, dict):
            self.dense = DenseMsfConfig(**self.dense)
        self.patch = tuple(int(p) for p in self.patch)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.base_filters < 1:
            raise ConfigError("base_filters must be >= 1")
        if len(self.patch) != 3 or any(p < 8 or p % 8 for p in self.patch):
            raise ConfigError(f"patch {self.patch} must be three positive multiples of 8")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d


def decoder_widths(widths: Sequence[int]) -> list[int]:
    """Output width of the decoder stage at each scale (finest first).

    Each stage emits the width of the next finer stream, so the upsampled
    features and that stream's skip enter the next stage in equal parts.
    """
    return [widths[0]] + list(widths[:-1])


class SegNet(Module):
    """Encoder -> one fusion block -> U-shaped decoder -> 2 sigmoid channels."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        widths = stream_widths(cfg.base_filters)
        self.encoder = Encoder(cfg.base_filters, rng)
        if cfg.variant == "focal":
            self.fusion = FocalFuseBlock(widths, cfg.focal, rng)
        else:
            self.fusion = DenseMsfBlock(widths, cfg.dense, rng)
        dec = decoder_widths(widths)
        self.decoder = {}
        below = widths[-1]
        for a in range(NUM_SCALES - 2, -1, -1):
            self.decoder[a] = Conv3d(below + widths[a], dec[a], 3, rng)
            below = dec[a]
        self.head = Linear(widths[0], 2, rng)
        if not cfg.cross_scale:
            self.freeze_cross_scale()

    def fused(self, x: Tensor) -> list:
        return self.fusion(self.encoder(x))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[0] != 2:
            raise DimensionError(f"input must be (2, D, H, W), got {x.shape}")
        skips = self.fused(x)
        h = skips[-1]
        for a in range(NUM_SCALES - 2, -1, -1):
            h = ops.resize_trilinear(h, 2, "up")
            h = ops.gelu(self.decoder[a](ops.concat_channels([h, skips[a]])))
        return ops.sigmoid(self.head(h))

    def predict(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(np.asarray(x, dtype=self.head.weight.dtype))).data

    def cross_scale_projections(self) -> list[Linear]:
        return self.fusion.cross_scale_projections()

    def freeze_cross_scale(self) -> None:
        """No-fusion ablation: zero every cross-stream projection and stop training it."""
        for proj in self.cross_scale_projections():
            for p in (proj.weight, proj.bias):
                p.data = np.zeros_like(p.data)
                p.requires_grad = False


def build(cfg: ModelConfig) -> SegNet:
    return SegNet(cfg)


def forward(model: SegNet, x: Tensor) -> Tensor:
    return model(x)


def predict_mask(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Hard labels from the two probability channels.

    0 where both channels are below ``threshold``, else 1 + argmax channel;
    ties resolve to GTVp (label 1).
    """
    probs = np.asarray(probs)
    if probs.shape[0] != 2:
        raise DimensionError(f"expected 2 probability channels, got {probs.shape[0]}")
    labels = np.where(probs[1] > probs[0], 2, 1).astype(np.uint8)
    labels[(probs[0] < threshold) & (probs[1] < threshold)] = 0
    return labels


def _starts(n: int, p: int, step: int) -> list[int]:
    if n <= p:
        return [0]
    starts = list(range(0, n - p + 1, step))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def sliding_window_infer(predict_fn: Callable[[np.ndarray], np.ndarray], volume: np.ndarray,
                         patch: Sequence[int], overlap: float = 0.5) -> np.ndarray:
    """Tile ``volume`` with ``patch``-sized windows and mean-blend the outputs.

    Volumes smaller than the patch are zero-padded up to it and the result is
    cropped back.
    """
    if not 0.0 <= overlap < 1.0:
        raise ConfigError(f"overlap must be in [0, 1), got {overlap}")
    volume = np.asarray(volume)
    ext = volume.shape[1:]
    patch = tuple(int(p) for p in patch)
    padded_ext = tuple(max(n, p) for n, p in zip(ext, patch))
    if padded_ext != ext:
        pad = [(0, 0)] + [(0, m - n) for n, m in zip(ext, padded_ext)]
        volume = np.pad(volume, pad)
    steps = [max(1, int(p * (1.0 - overlap))) for p in patch]
    grids = [_starts(n, p, s) for n, p, s in zip(padded_ext, patch, steps)]

    acc = None
    count = np.zeros(padded_ext, dtype=np.float64)
    for z in grids[0]:
        for y in grids[1]:
            for x in grids[2]:
                window = (slice(z, z + patch[0]), slice(y, y + patch[1]), slice(x, x + patch[2]))
                out = np.asarray(predict_fn(volume[(slice(None),) + window]))
                if acc is None:
                    acc = np.zeros((out.shape[0],) + padded_ext, dtype=np.float64)
                acc[(slice(None),) + window] += out
                count[window] += 1.0
    blended = (acc / count).astype(np.float32)
    return blended[(slice(None),) + tuple(slice(0, n) for n in ext)]


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: SegNet, iteration: int = 0, val_score: float | None = None) -> None:
    manifest = {"config": model.cfg.to_dict(), "iteration": int(iteration),
                "val_score": None if val_score is None else float(val_score)}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    chunks = [CKPT_MAGIC, struct.pack("<I", len(head)), head]
    for name, p in model.named_parameters():
        nb = name.encode()
        data = np.ascontiguousarray(p.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(manifest, named parameter arrays)`` from an H3CK file."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not an H3CK checkpoint")
    if len(buf) < 8:
        raise TruncatedFileError(f"{path}: truncated header")
    (mlen,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + mlen:
        raise TruncatedFileError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(buf[8:8 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: malformed manifest") from exc
    params = {}
    pos = 8 + mlen
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + nlen].decode()
            pos += 4 + nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
            pos += 4 + 4 * ndim
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise TruncatedFileError(f"{path}: parameter {name} truncated")
            params[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise TruncatedFileError(f"{path}: parameter record cut short") from exc
    except UnicodeDecodeError as exc:
        raise CorruptFileError(f"{path}: malformed parameter name") from exc
    return manifest, params


def load_checkpoint(path) -> tuple[SegNet, dict]:
    manifest, params = read_checkpoint(path)
    model = SegNet(ModelConfig(**manifest["config"]))
    model.load_state_dict(params)
    return model, manifest
