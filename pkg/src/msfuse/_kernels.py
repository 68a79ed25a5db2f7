"""Compiled inner loops for the memory-bound convolution paths.

Each kernel has a fixed loop order, so results are bit-identical from run to
run.  Arrays are channel-first and already zero-padded where relevant.
"""

import math

import numpy as np
from numba import njit


# unfolded tiles are kept near this many elements so they stay in cache
TILE_ELEMS = 65536


@njit(cache=True)
def _tile_rows(kk, oh, ow):
    return max(1, min(oh, TILE_ELEMS // (kk * ow)))


@njit(cache=True)
def _fill_rows(xp, k, stride, d, h0, nh, ow, cols):
    """Unfold output rows ``h0 .. h0+nh`` of plane ``d`` into
    ``cols[(c*k + a)*k*k + b*k + e, hh*ow + w]``."""
    nc = xp.shape[0]
    row = 0
    for c in range(nc):
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    for hh in range(nh):
                        base = hh * ow
                        h = h0 + hh
                        if stride == 1:
                            src = xp[c, d + a, h + b, e:e + ow]
                            for w in range(ow):
                                cols[row, base + w] = src[w]
                        else:
                            for w in range(ow):
                                cols[row, base + w] = xp[c, d * stride + a, h * stride + b, w * stride + e]
                    row += 1


@njit(cache=True)
def _scatter_rows(cols, k, stride, d, h0, nh, ow, gxp):
    nc = gxp.shape[0]
    row = 0
    for c in range(nc):
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    for hh in range(nh):
                        base = hh * ow
                        h = h0 + hh
                        if stride == 1:
                            dst = gxp[c, d + a, h + b, e:e + ow]
                            for w in range(ow):
                                dst[w] += cols[row, base + w]
                        else:
                            for w in range(ow):
                                gxp[c, d * stride + a, h * stride + b, w * stride + e] += cols[row, base + w]
                    row += 1


@njit(cache=True)
def _gather_rows(g, d, h0, nh):
    """``g[:, d, h0:h0+nh]`` as a contiguous ``(C, nh*ow)`` matrix."""
    nco, ow = g.shape[0], g.shape[3]
    out = np.empty((nco, nh * ow), dtype=g.dtype)
    for co in range(nco):
        for hh in range(nh):
            for w in range(ow):
                out[co, hh * ow + w] = g[co, d, h0 + hh, w]
    return out


@njit(cache=True)
def conv_forward(xp, w2, k, stride, out):
    """``out[:, d, rows]`` = ``w2 @ unfold(rows)``, tile by tile; ``out`` is ``(Cout, od, oh, ow)``."""
    nco, od, oh, ow = out.shape
    kk = w2.shape[1]
    rows = _tile_rows(kk, oh, ow)
    for d in range(od):
        for h0 in range(0, oh, rows):
            nh = min(rows, oh - h0)
            cols = np.empty((kk, nh * ow), dtype=xp.dtype)
            _fill_rows(xp, k, stride, d, h0, nh, ow, cols)
            r = np.dot(w2, cols)
            for co in range(nco):
                for hh in range(nh):
                    for w in range(ow):
                        out[co, d, h0 + hh, w] = r[co, hh * ow + w]


@njit(cache=True)
def conv_weight_grad(xp, g, k, stride, gw2t):
    """Weight gradient, transposed: ``gw2t`` is ``(Cin*k^3, Cout)``."""
    nco, od, oh, ow = g.shape
    kk = gw2t.shape[0]
    # (kk x n) @ (n x Cout) runs best on tiles about twice the forward size
    rows = max(1, min(oh, 2 * TILE_ELEMS // (kk * ow)))
    gw2t[:] = 0.0
    for d in range(od):
        for h0 in range(0, oh, rows):
            nh = min(rows, oh - h0)
            cols = np.empty((kk, nh * ow), dtype=xp.dtype)
            _fill_rows(xp, k, stride, d, h0, nh, ow, cols)
            gt = np.empty((nh * ow, nco), dtype=g.dtype)
            for co in range(nco):
                for hh in range(nh):
                    for w in range(ow):
                        gt[hh * ow + w, co] = g[co, d, h0 + hh, w]
            gw2t += np.dot(cols, gt)


@njit(cache=True)
def conv_input_grad(g, w2t, k, stride, gxp):
    """Adjoint of :func:`conv_forward`; ``w2t`` is ``w2.T`` (contiguous), ``gxp`` starts zeroed."""
    nco, od, oh, ow = g.shape
    rows = _tile_rows(w2t.shape[0], oh, ow)
    for d in range(od):
        for h0 in range(0, oh, rows):
            nh = min(rows, oh - h0)
            cols = np.dot(w2t, _gather_rows(g, d, h0, nh))
            _scatter_rows(cols, k, stride, d, h0, nh, ow, gxp)


# Depthwise kernels read the padded input through its stride**3 phase arrays,
# ``ph[(pa*s + pb)*s + pe] = xp[:, pa::s, pb::s, pe::s]``, so tap (a, b, e)
# becomes a unit-stride read at offset (a//s, b//s, e//s).  For s == 1 the
# single phase is the input itself.  Taps along the last axis are applied up to
# three per pass over a row; that keeps the row in registers and lets LLVM
# vectorise, which a one-tap-per-pass loop does not get.

@njit(cache=True)
def phase_split(xp, s, ph):
    nq, nc, ed, eh, ew = ph.shape
    _, d0, h0, w0 = xp.shape
    ph[:] = 0.0
    for q in range(nq):
        pa, pb, pe = q // (s * s), (q // s) % s, q % s
        nd, nh, nw = (d0 - pa + s - 1) // s, (h0 - pb + s - 1) // s, (w0 - pe + s - 1) // s
        for c in range(nc):
            for d in range(nd):
                for h in range(nh):
                    src = xp[c, pa + s * d, pb + s * h]
                    dst = ph[q, c, d, h]
                    for j in range(nw):
                        dst[j] = src[pe + s * j]


@njit(cache=True)
def phase_merge(ph, s, crop, out):
    """Inverse of ``phase_split`` restricted to ``crop`` voxels in from every face."""
    nc, od, oh, ow = out.shape
    for c in range(nc):
        for d in range(od):
            z = d + crop
            for h in range(oh):
                y = h + crop
                qb = ((z % s) * s + y % s) * s
                dst = out[c, d, h]
                for pe in range(s):
                    # columns w with (w + crop) % s == pe
                    w0 = (pe - crop) % s
                    src = ph[qb + pe, c, z // s, y // s]
                    j0 = (w0 + crop) // s
                    for j in range((ow - w0 + s - 1) // s):
                        dst[w0 + s * j] = src[j0 + j]


@njit(cache=True, inline="always")
def _row_taps(row, srcs, wts, n):
    ow = row.shape[0]
    if n == 3:
        s0, s1, s2 = srcs
        w0, w1, w2 = wts
        for w in range(ow):
            row[w] += w0 * s0[w] + w1 * s1[w] + w2 * s2[w]
    elif n == 2:
        s0, s1, _ = srcs
        w0, w1, _ = wts
        for w in range(ow):
            row[w] += w0 * s0[w] + w1 * s1[w]
    else:
        s0 = srcs[0]
        w0 = wts[0]
        for w in range(ow):
            row[w] += w0 * s0[w]


@njit(cache=True)
def dw_forward(ph, wt, s, out):
    nc, od, oh, ow = out.shape
    k = wt.shape[1]
    for c in range(nc):
        for d in range(od):
            for h in range(oh):
                row = out[c, d, h]
                row[:] = 0.0
                for a in range(k):
                    for b in range(k):
                        qb = ((a % s) * s + b % s) * s
                        da, hb = d + a // s, h + b // s
                        for e0 in range(0, k, 3):
                            n = min(3, k - e0)
                            e1, e2 = min(e0 + 1, k - 1), min(e0 + 2, k - 1)
                            srcs = (ph[qb + e0 % s, c, da, hb, e0 // s:],
                                    ph[qb + e1 % s, c, da, hb, e1 // s:],
                                    ph[qb + e2 % s, c, da, hb, e2 // s:])
                            _row_taps(row, srcs, (wt[c, a, b, e0], wt[c, a, b, e1], wt[c, a, b, e2]), n)


@njit(cache=True)
def dw_forward3(ph, wt, s, out):
    """``dw_forward`` for 3x3x3 kernels; constant tap loops let LLVM unroll and hoist the row views."""
    nc, od, oh, ow = out.shape
    o1, o2 = 1 // s, 2 // s
    for c in range(nc):
        for d in range(od):
            for h in range(oh):
                row = out[c, d, h]
                row[:] = 0.0
                for a in range(3):
                    for b in range(3):
                        qb = ((a % s) * s + b % s) * s
                        da, hb = d + a // s, h + b // s
                        s0 = ph[qb, c, da, hb]
                        s1 = ph[qb + 1 % s, c, da, hb, o1:]
                        s2 = ph[qb + 2 % s, c, da, hb, o2:]
                        w0, w1, w2 = wt[c, a, b, 0], wt[c, a, b, 1], wt[c, a, b, 2]
                        for w in range(ow):
                            row[w] += w0 * s0[w] + w1 * s1[w] + w2 * s2[w]


@njit(cache=True)
def dw_weight_grad3(ph, g, s, gw):
    nc, od, oh, ow = g.shape
    o1, o2 = 1 // s, 2 // s
    l0 = np.empty(ow, dtype=np.float64)
    l1 = np.empty(ow, dtype=np.float64)
    l2 = np.empty(ow, dtype=np.float64)
    for c in range(nc):
        for a in range(3):
            for b in range(3):
                qb = ((a % s) * s + b % s) * s
                l0[:] = 0.0
                l1[:] = 0.0
                l2[:] = 0.0
                for d in range(od):
                    for h in range(oh):
                        da, hb = d + a // s, h + b // s
                        gr = g[c, d, h]
                        s0 = ph[qb, c, da, hb]
                        s1 = ph[qb + 1 % s, c, da, hb, o1:]
                        s2 = ph[qb + 2 % s, c, da, hb, o2:]
                        for w in range(ow):
                            gv = np.float64(gr[w])
                            l0[w] += gv * s0[w]
                            l1[w] += gv * s1[w]
                            l2[w] += gv * s2[w]
                gw[c, a, b, 0] = l0.sum()
                gw[c, a, b, 1] = l1.sum()
                gw[c, a, b, 2] = l2.sum()


@njit(cache=True)
def dw_adjoint(gp, wt, s, lo, gph):
    """Adjoint of ``dw_forward`` written as a gather into the phase arrays.

    ``gp`` is the output gradient zero-padded by ``lo`` on the low side and
    enough on the high side to cover every phase row.
    """
    nq, nc, ed, eh, ew = gph.shape
    k = wt.shape[1]
    for q in range(nq):
        pa, pb, pe = q // (s * s), (q // s) % s, q % s
        ne = (k - pe + s - 1) // s
        for c in range(nc):
            for d in range(ed):
                for h in range(eh):
                    row = gph[q, c, d, h]
                    row[:] = 0.0
                    for a in range(pa, k, s):
                        for b in range(pb, k, s):
                            da, hb = d - a // s + lo, h - b // s + lo
                            for j0 in range(0, ne, 3):
                                n = min(3, ne - j0)
                                e0 = pe + s * j0
                                e1, e2 = pe + s * min(j0 + 1, ne - 1), pe + s * min(j0 + 2, ne - 1)
                                srcs = (gp[c, da, hb, lo - e0 // s:],
                                        gp[c, da, hb, lo - e1 // s:],
                                        gp[c, da, hb, lo - e2 // s:])
                                _row_taps(row, srcs, (wt[c, a, b, e0], wt[c, a, b, e1], wt[c, a, b, e2]), n)


@njit(cache=True)
def dw_weight_grad(ph, g, s, gw):
    # one float64 accumulator per output column keeps the summation order fixed
    nc, od, oh, ow = g.shape
    k = gw.shape[1]
    l0 = np.empty(ow, dtype=np.float64)
    l1 = np.empty(ow, dtype=np.float64)
    l2 = np.empty(ow, dtype=np.float64)
    for c in range(nc):
        for a in range(k):
            for b in range(k):
                qb = ((a % s) * s + b % s) * s
                for e0 in range(0, k, 3):
                    n = min(3, k - e0)
                    e1, e2 = min(e0 + 1, k - 1), min(e0 + 2, k - 1)
                    l0[:] = 0.0
                    l1[:] = 0.0
                    l2[:] = 0.0
                    for d in range(od):
                        for h in range(oh):
                            da, hb = d + a // s, h + b // s
                            gr = g[c, d, h]
                            s0 = ph[qb + e0 % s, c, da, hb, e0 // s:]
                            s1 = ph[qb + e1 % s, c, da, hb, e1 // s:]
                            s2 = ph[qb + e2 % s, c, da, hb, e2 // s:]
                            for w in range(ow):
                                gv = np.float64(gr[w])
                                l0[w] += gv * s0[w]
                                l1[w] += gv * s1[w]
                                l2[w] += gv * s2[w]
                    gw[c, a, b, e0] = l0.sum()
                    if n > 1:
                        gw[c, a, b, e1] = l1.sum()
                    if n > 2:
                        gw[c, a, b, e2] = l2.sum()


@njit(cache=True)
def gelu_forward(x, out, cdf):
    flat, fo, fc = x.ravel(), out.ravel(), cdf.ravel()
    for i in range(flat.size):
        v = flat[i]
        p = 0.5 * (1.0 + math.erf(v * 0.7071067811865476))
        fc[i] = p
        fo[i] = v * p


# odd/even minimax coefficients of erf(z) ~ z P(z^2) / Q(z^2) on [-4, 4]
# (the single-precision fit used by Eigen); |error| stays within 2 ulp of 1.0
_ERF_P = (-1.60960333262415e-02, -2.95459980854025e-03, -7.34990630326855e-04, -5.69250639462346e-05,
          -2.10102402082508e-06, 2.77068142495902e-08, -2.72614225801306e-10)
_ERF_Q = (-1.42647390514189e-02, -7.37332916720468e-03, -1.68282697438203e-03, -2.13374055278905e-04,
          -1.45660718464996e-05)


@njit(cache=True)
def gelu_forward_f32(x, out, cdf):
    """Single-precision GeLU with a branch-free rational erf, so the loop vectorises."""
    a1, a3, a5, a7, a9, a11, a13 = [np.float32(c) for c in _ERF_P]
    b0, b2, b4, b6, b8 = [np.float32(c) for c in _ERF_Q]
    r2 = np.float32(0.7071067811865476)
    half, one = np.float32(0.5), np.float32(1.0)
    lo, hi = np.float32(-4.0), np.float32(4.0)
    flat, fo, fc = x.ravel(), out.ravel(), cdf.ravel()
    for i in range(flat.size):
        v = flat[i]
        z = min(max(v * r2, lo), hi)
        s = z * z
        p = (((((a13 * s + a11) * s + a9) * s + a7) * s + a5) * s + a3) * s + a1
        q = (((b8 * s + b6) * s + b4) * s + b2) * s + b0
        c = half * (one + z * p / q)
        fc[i] = c
        fo[i] = v * c


@njit(cache=True)
def gelu_backward(x, cdf, g, gx):
    flat, fc, fg, fx = x.ravel(), cdf.ravel(), g.ravel(), gx.ravel()
    for i in range(flat.size):
        v = flat[i]
        fx[i] = fg[i] * (fc[i] + v * math.exp(-0.5 * v * v) * 0.3989422804014327)
