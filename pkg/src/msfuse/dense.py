"""Densely connected multi-scale fusion block (3D-MSF).

Layer ``l`` of stream ``a`` sees every earlier layer of its own stream and
layer ``l-1`` of the three other streams.  A depthwise conv cannot change the
channel count, so each layer projects its concatenated input to ``g``
channels before the depthwise 3x3x3 conv.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .encoder import NUM_SCALES, ScaleStreams, check_streams
from .errors import ConfigError, DimensionError
from .focal import RescaleCross
from .nn import DepthwiseConv3d, Linear, Module
from .tensor import Tensor


@dataclass
class DenseMsfConfig:
    layers_per_block: int = 3
    growth_rate: int = 8

    def __post_init__(self):
        if self.layers_per_block < 1 or self.growth_rate < 1:
            raise ConfigError("layers_per_block and growth_rate must be >= 1")


def dense_input_channels(c0: int, l: int, g: int) -> int:
    """Channels entering layer ``l`` (1-based) of a stream with ``c0`` input channels."""
    return c0 + (l - 1) * g + (NUM_SCALES - 1) * g


class DenseLayer(Module):
    def __init__(self, a: int, l: int, widths: Sequence[int], g: int, rng: np.random.Generator, k: int = 3):
        self.a, self.l = a, l
        self.foreign = {b: RescaleCross(widths[b] if l == 1 else g, g, b + 1, a + 1, rng, k)
                        for b in range(NUM_SCALES) if b != a}
        self.mix = Linear(dense_input_channels(widths[a], l, g), g, rng)
        self.dw = DepthwiseConv3d(g, k, rng)

    def forward(self, history: Sequence[Tensor], foreign: dict) -> Tensor:
        if len(history) != self.l:
            raise DimensionError(f"layer {self.l} needs {self.l} history tensors, got {len(history)}")
        parts = list(history) + [self.foreign[b](foreign[b]) for b in sorted(self.foreign)]
        ext = history[0].shape[1:]
        for p in parts:
            if p.shape[1:] != ext:
                raise DimensionError(f"dense input extent {p.shape[1:]} != {ext} (bug)")
        return ops.gelu(self.dw(self.mix(ops.concat_channels(parts))))


def dense_layer(history: Sequence[Tensor], foreign: dict, layer: DenseLayer) -> Tensor:
    return layer(history, foreign)


class DenseMsfBlock(Module):
    def __init__(self, widths: Sequence[int], cfg: DenseMsfConfig, rng: np.random.Generator):
        self.widths = list(widths)
        self.cfg = cfg
        g, L = cfg.growth_rate, cfg.layers_per_block
        self.layers = [[DenseLayer(a, l, widths, g, rng) for a in range(NUM_SCALES)]
                       for l in range(1, L + 1)]
        self.transition = [Linear(w + L * g, w, rng) for w in widths]

    def cross_scale_projections(self) -> list[Linear]:
        return [lay.foreign[b].projection for row in self.layers for lay in row for b in sorted(lay.foreign)]

    def forward(self, streams: Sequence[Tensor]) -> ScaleStreams:
        check_streams(streams, self.widths)
        history = [[s] for s in streams]
        for row in self.layers:
            last = [h[-1] for h in history]
            new = [lay(history[a], {b: last[b] for b in range(NUM_SCALES) if b != a})
                   for a, lay in enumerate(row)]
            for a in range(NUM_SCALES):
                history[a].append(new[a])
        return [t(ops.concat_channels(h)) for t, h in zip(self.transition, history)]
