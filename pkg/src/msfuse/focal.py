"""Focal fuse block: cross-scale focal levels, gating, aggregation, modulation.

For every scale ``a`` the block computes

    F_a0 = embed(X_a)
    F_al = GeLU(DW3(Conv1(F_a,l-1 ++ rescaled F_b,l-1 for b != a)))   l = 1..N
    F_a,N+1 = GeLU(global_avg_pool(F_aN))                            global level
    G_a = Linear(F_a0)                                               N+1 gate channels
    F_a = sum_l F_al * G_al
    MOD_a = out_proj(F_a * q(X_a))
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .encoder import NUM_SCALES, Embed, ScaleStreams, check_streams
from .errors import ConfigError, DimensionError
from .nn import DepthwiseConv3d, Linear, Module
from .tensor import Tensor


@dataclass
class FocalFuseConfig:
    num_levels: int = 2
    kernel_size: int = 3

    def __post_init__(self):
        if self.num_levels < 1:
            raise ConfigError("num_levels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")

    @property
    def gate_width(self) -> int:
        return self.num_levels + 1


def _check_scale(s: int) -> None:
    if not 1 <= s <= NUM_SCALES:
        raise ConfigError(f"scale must be in 1..{NUM_SCALES}, got {s}")


class RescaleCross(Module):
    """Move a feature map from one stream to another.

    Downward: stride-2 depthwise conv, avg-pool for the remaining factor,
    then project.  Upward: project, stride-2 transposed depthwise conv, then
    trilinear for the remaining factor.  The projection always runs at the
    coarser of the two resolutions.  Depthwise kernels start as exact
    mean-pool / nearest-unpool so constant fields pass through unchanged.
    """

    def __init__(self, cin: int, cout: int, from_scale: int, to_scale: int,
                 rng: np.random.Generator, k: int = 3):
        _check_scale(from_scale)
        _check_scale(to_scale)
        self.from_scale, self.to_scale = from_scale, to_scale
        self.steps = to_scale - from_scale
        if self.steps > 0:
            self.resample = DepthwiseConv3d(cin, k, rng, stride=2, init="down")
            self.projection = Linear(cin, cout, rng)
        elif self.steps < 0:
            self.projection = Linear(cin, cout, rng)
            self.resample = DepthwiseConv3d(cout, k, rng, stride=2, init="up", bias=False)
        else:
            self.projection = None

    def forward(self, x: Tensor) -> Tensor:
        if self.steps == 0:
            return x
        residual = 2 ** (abs(self.steps) - 1)
        if self.steps > 0:
            h = self.resample(x)
            h = ops.pool3d(h, "avg", residual)
            return self.projection(h)
        h = self.projection(x)
        h = ops.transposed_depthwise_conv3d(h, self.resample.weight, stride=2)
        return ops.resize_trilinear(h, residual, "up")


def rescale_cross(x: Tensor, from_scale: int, to_scale: int, rescaler: RescaleCross | None = None) -> Tensor:
    _check_scale(from_scale)
    _check_scale(to_scale)
    if from_scale == to_scale:
        return x
    if rescaler is None or (rescaler.from_scale, rescaler.to_scale) != (from_scale, to_scale):
        raise ConfigError(f"need a RescaleCross for {from_scale}->{to_scale}")
    return rescaler(x)


class FocalLevel(Module):
    """One focal level for stream ``a`` (0-based index)."""

    def __init__(self, a: int, widths: Sequence[int], k: int, rng: np.random.Generator):
        self.a = a
        wa = widths[a]
        self.foreign = {b: RescaleCross(widths[b], wa, b + 1, a + 1, rng, k)
                        for b in range(NUM_SCALES) if b != a}
        self.mix = Linear(NUM_SCALES * wa, wa, rng)
        self.dw = DepthwiseConv3d(wa, k, rng)

    def forward(self, prev: Sequence[Tensor]) -> Tensor:
        parts = [prev[self.a]] + [self.foreign[b](prev[b]) for b in sorted(self.foreign)]
        ext = prev[self.a].shape[1:]
        for p in parts:
            if p.shape[1:] != ext:
                raise DimensionError(f"rescaled stream extent {p.shape[1:]} != {ext} (bug)")
        return ops.gelu(self.dw(self.mix(ops.concat_channels(parts))))


def focal_level(prev: Sequence[Tensor], a: int, level: FocalLevel) -> Tensor:
    return level(prev)


def gate(f0: Tensor, proj: Linear) -> Tensor:
    return proj(f0)


def aggregate(levels: Sequence[Tensor], gates: Tensor) -> Tensor:
    """Sum of level features weighted by their gate channel."""
    if gates.shape[0] != len(levels):
        raise DimensionError(f"{len(levels)} levels but {gates.shape[0]} gate channels")
    out = None
    for l, f in enumerate(levels):
        term = ops.mul(f, ops.channel_slice(gates, l, l + 1))
        out = term if out is None else ops.add(out, term)
    return out


def modulate(fa: Tensor, xa: Tensor, query: Linear, out_proj: Linear) -> Tensor:
    return out_proj(ops.mul(fa, query(xa)))


@dataclass
class FocalState:
    levels: list = field(default_factory=list)   # per scale: [F_a0, ..., F_a,N+1]
    gates: list = field(default_factory=list)
    aggregated: list = field(default_factory=list)
    modulated: list = field(default_factory=list)


class FocalFuseBlock(Module):
    def __init__(self, widths: Sequence[int], cfg: FocalFuseConfig, rng: np.random.Generator):
        self.widths = list(widths)
        self.cfg = cfg
        self.embed = Embed(widths, rng)
        self.levels = [[FocalLevel(a, widths, cfg.kernel_size, rng) for a in range(NUM_SCALES)]
                       for _ in range(cfg.num_levels)]
        self.gates = [Linear(w, cfg.gate_width, rng) for w in widths]
        self.query = [Linear(w, w, rng) for w in widths]
        self.out_proj = [Linear(w, w, rng) for w in widths]

    def cross_scale_projections(self) -> list[Linear]:
        return [lvl.foreign[b].projection for row in self.levels for lvl in row for b in sorted(lvl.foreign)]

    def forward(self, streams: Sequence[Tensor], state: FocalState | None = None) -> ScaleStreams:
        check_streams(streams, self.widths)
        f0 = self.embed(streams)
        per_scale = [[f] for f in f0]
        prev = f0
        for row in self.levels:
            prev = [lvl(prev) for lvl in row]
            for a in range(NUM_SCALES):
                per_scale[a].append(prev[a])
        out = []
        for a in range(NUM_SCALES):
            per_scale[a].append(ops.gelu(ops.global_avg_pool(prev[a])))
            g = gate(f0[a], self.gates[a])
            fa = aggregate(per_scale[a][1:], g)
            mod = modulate(fa, streams[a], self.query[a], self.out_proj[a])
            out.append(mod)
            if state is not None:
                state.levels.append(per_scale[a])
                state.gates.append(g)
                state.aggregated.append(fa)
                state.modulated.append(mod)
        return out
