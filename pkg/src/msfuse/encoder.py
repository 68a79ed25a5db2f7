"""Four-scale convolutional encoder and the per-scale linear embedding."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import Conv3d, Linear, Module
from .tensor import Tensor

NUM_SCALES = 4

# Ordered per-resolution features, finest first.
ScaleStreams = list


def stream_widths(base: int) -> list[int]:
    return [base * 2 ** a for a in range(NUM_SCALES)]


def check_streams(streams: Sequence[Tensor], widths: Sequence[int] | None = None) -> None:
    """Raise if ``streams`` is not a valid four-scale pyramid."""
    if len(streams) != NUM_SCALES:
        raise DimensionError(f"expected {NUM_SCALES} streams, got {len(streams)}")
    for a in range(1, NUM_SCALES):
        prev, cur = streams[a - 1].shape[1:], streams[a].shape[1:]
        if any(p != 2 * c for p, c in zip(prev, cur)):
            raise DimensionError(f"stream {a + 1} extents {cur} are not half of {prev}")
    if widths is not None:
        got = [s.shape[0] for s in streams]
        if got != list(widths):
            raise DimensionError(f"stream widths {got} != expected {list(widths)}")


class Encoder(Module):
    """Two conv3x3x3 + GeLU layers per scale, average-pool between scales."""

    def __init__(self, base: int, rng: np.random.Generator, in_channels: int = 2):
        widths = stream_widths(base)
        self.widths = widths
        self.blocks = []
        cin = in_channels
        for w in widths:
            self.blocks.append([Conv3d(cin, w, 3, rng), Conv3d(w, w, 3, rng)])
            cin = w

    def forward(self, x: Tensor) -> ScaleStreams:
        if any(n % 8 for n in x.shape[1:]):
            raise ConfigError(f"input extents {x.shape[1:]} must be divisible by 8")
        streams = []
        h = x
        for a, (c1, c2) in enumerate(self.blocks):
            if a:
                h = ops.pool3d(h, "avg", 2)
            h = ops.gelu(c2(ops.gelu(c1(h))))
            streams.append(h)
        return streams


def encoder_forward(x: Tensor, encoder: Encoder) -> ScaleStreams:
    return encoder(x)


class Embed(Module):
    """Width-preserving pointwise projection per scale (X_a -> F_a0)."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        self.proj = [Linear(w, w, rng) for w in widths]

    def forward(self, streams: Sequence[Tensor]) -> ScaleStreams:
        return [p(s) for p, s in zip(self.proj, streams)]
