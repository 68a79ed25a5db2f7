"""Finite-difference sweep over every differentiable op and both fusion blocks.

Each case builds fresh float64 inputs for three small shapes.  Ops are held to
1e-5 relative error and whole blocks to 1e-4.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import losses, ops
from .dense import DenseMsfBlock, DenseMsfConfig
from .encoder import stream_widths
from .focal import FocalFuseBlock, FocalFuseConfig, RescaleCross
from .gradcheck import GradcheckReport, gradcheck
from .tensor import Tensor, precision

OP_TOL = 1e-5
BLOCK_TOL = 1e-4
VOL_SHAPES = [(2, 3, 4, 5), (3, 4, 4, 4), (1, 5, 3, 6)]
EVEN_SHAPES = [(2, 4, 4, 4), (3, 2, 4, 6), (1, 6, 2, 4)]


def _t(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _prob(rng, shape):
    return Tensor(rng.uniform(0.05, 0.95, shape), requires_grad=True)


def op_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, list]]:
    """Yield ``(name, fn, inputs)`` for every op, three shapes each."""
    for i, s in enumerate(VOL_SHAPES):
        c = s[0]
        for stride, pad in ((1, 1), (2, 1), (1, 0)):
            yield (f"conv3d[s={stride},p={pad}] {s}",
                   lambda x, w, b, st=stride, p=pad: ops.conv3d(x, w, b, st, p),
                   [_t(rng, s), _t(rng, (2, c, 3, 3, 3)), _t(rng, 2)])
        for stride in (1, 2):
            yield (f"depthwise_conv3d[s={stride}] {s}",
                   lambda x, w, b, st=stride: ops.depthwise_conv3d(x, w, b, st, 1),
                   [_t(rng, s), _t(rng, (c, 3, 3, 3)), _t(rng, c)])
        yield (f"transposed_depthwise_conv3d {s}", lambda x, w: ops.transposed_depthwise_conv3d(x, w),
               [_t(rng, s), _t(rng, (c, 3, 3, 3))])
        yield f"gelu {s}", ops.gelu, [_t(rng, s, 2.0)]
        yield f"sigmoid {s}", ops.sigmoid, [_t(rng, s, 2.0)]
        yield (f"pointwise_linear {s}", ops.pointwise_linear,
               [_t(rng, s), _t(rng, (4, c)), _t(rng, 4)])
        yield f"global_avg_pool {s}", ops.global_avg_pool, [_t(rng, s)]
        yield f"add(broadcast) {s}", ops.add, [_t(rng, s), _t(rng, (c, 1, 1, 1))]
        yield f"mul(broadcast) {s}", ops.mul, [_t(rng, s), _t(rng, (c, 1, 1, 1))]
        yield f"scale {s}", lambda x: ops.scale(x, -1.7), [_t(rng, s)]
        yield (f"concat_channels {s}", lambda x, y: ops.concat_channels([x, y]),
               [_t(rng, s), _t(rng, (2,) + s[1:])])
        yield f"channel_slice {s}", lambda x: ops.channel_slice(x, 0, 1), [_t(rng, s)]
        yield f"sum_all {s}", ops.sum_all, [_t(rng, s)]
        yield f"mean_all {s}", ops.mean_all, [_t(rng, s)]
        target = (rng.random((2,) + s[1:]) > 0.5).astype(np.float64)
        yield f"bce_loss {s}", lambda p, y=target: losses.bce_loss(y, p), [_prob(rng, (2,) + s[1:])]
        yield f"dice_loss {s}", lambda p, y=target: losses.dice_loss(y, p), [_prob(rng, (2,) + s[1:])]
        yield (f"combined_loss {s}", lambda p, y=target: losses.combined_loss(y, p).total,
               [_prob(rng, (2,) + s[1:])])
    for s in EVEN_SHAPES:
        # distinct values keep max pooling away from ties
        x = Tensor(rng.permutation(np.prod(s)).reshape(s) * 0.1, requires_grad=True)
        yield f"pool3d[max] {s}", lambda x: ops.pool3d(x, "max"), [x]
        yield f"pool3d[avg] {s}", lambda x: ops.pool3d(x, "avg"), [_t(rng, s)]
        yield f"resize_trilinear[up x2] {s}", lambda x: ops.resize_trilinear(x, 2, "up"), [_t(rng, s)]
        yield f"resize_trilinear[down x2] {s}", lambda x: ops.resize_trilinear(x, 2, "down"), [_t(rng, s)]
        yield f"resize_trilinear[up x4] {s}", lambda x: ops.resize_trilinear(x, 4, "up"), [_t(rng, s)]


def _streams(rng, widths, ext):
    return [Tensor(rng.standard_normal((w,) + tuple(n >> a for n in ext)), requires_grad=True)
            for a, w in enumerate(widths)]


BLOCK_SHAPES = [(1, (8, 8, 8)), (2, (8, 8, 8)), (1, (16, 8, 8))]


def block_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, list]]:
    """Full fusion blocks in float64, checked w.r.t. the streams and every parameter."""
    for i, (base, ext) in enumerate(BLOCK_SHAPES):
        widths = stream_widths(base)
        with precision(np.float64):
            focal = FocalFuseBlock(widths, FocalFuseConfig(num_levels=1 + i % 2), rng).astype(np.float64)
            dense = DenseMsfBlock(widths, DenseMsfConfig(layers_per_block=2, growth_rate=2), rng).astype(np.float64)
        for name, block in (("FocalFuseBlock", focal), ("DenseMsfBlock", dense)):
            streams = _streams(rng, widths, ext)
            params = block.parameters()
            for p in params:  # random biases so no term is trivially zero
                p.data = p.data + 0.1 * rng.standard_normal(p.shape)

            def fn(*args, block=block, n=len(streams)):
                outs = block(list(args[:n]))
                return ops.concat_channels([ops.resize_trilinear(o, 1 << a, "up") for a, o in enumerate(outs)])

            yield f"{name} base={base} ext={ext}", fn, streams + params
    for src, dst in ((1, 4), (4, 1), (2, 3)):
        with precision(np.float64):
            r = RescaleCross(3, 2, src, dst, rng).astype(np.float64)
        ext = (8 >> (src - 1),) * 3
        for p in r.parameters():
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
        yield (f"RescaleCross {src}->{dst}", lambda x, *ps, r=r: r(x),
               [_t(rng, (3,) + ext)] + r.parameters())


def run_suite(seed: int = 0, block_coords: int | None = 60,
              report: Callable[[GradcheckReport], None] | None = None) -> list[GradcheckReport]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in op_cases(rng):
        results.append(gradcheck(fn, inputs, tol=OP_TOL, name=name, seed=seed))
        if report:
            report(results[-1])
    for name, fn, inputs in block_cases(rng):
        results.append(gradcheck(fn, inputs, tol=BLOCK_TOL, name=name, seed=seed, max_coords=block_coords))
        if report:
            report(results[-1])
    return results
