"""Compiled inner loops for the executor.

Every kernel fills a half-open range ``[r0, r1)`` of output rows (or output
channels for the vector ops), so callers can split work across threads.
Each output element is produced by one call with a fixed summation order:

* float conv / depthwise: acc = 0, then over (kh, kw, cin) in that order,
  out-of-bounds taps skipped, bias added last; float32 throughout.
* float FC: acc = 0, then over the inputs in order, bias added last.
* global average pool: float32 sum over (h, w) row-major, then divide.

Integer kernels accumulate exactly in int32 and requantize with a float64
multiplier, rounding half away from zero.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_JIT = dict(nogil=True, cache=True, error_model="numpy")


@njit(**_JIT)
def _round_away(v):
    if v >= 0.0:
        return np.floor(v + 0.5)
    return -np.floor(-v + 0.5)


@njit(**_JIT)
def _saturate(v, lo, hi):
    r = _round_away(v)
    if r < lo:
        return lo
    if r > hi:
        return hi
    return r


# -- float32 ---------------------------------------------------------------------


@njit(**_JIT)
def conv2d_f32(x, w, b, out, stride, pad_t, pad_l, r0, r1):
    """x: (H, W, Cin); w: (KH, KW, Cin, Cout); out: (Ho, Wo, Cout)."""
    H, W, Cin = x.shape
    KH, KW, _, Cout = w.shape
    Wo = out.shape[1]
    for oh in range(r0, r1):
        for ow in range(Wo):
            o = out[oh, ow]
            for co in range(Cout):
                o[co] = np.float32(0.0)
            for kh in range(KH):
                ih = oh * stride + kh - pad_t
                if ih < 0 or ih >= H:
                    continue
                for kw in range(KW):
                    iw = ow * stride + kw - pad_l
                    if iw < 0 or iw >= W:
                        continue
                    xr = x[ih, iw]
                    for ci in range(Cin):
                        xv = xr[ci]
                        wr = w[kh, kw, ci]
                        for co in range(Cout):
                            o[co] += xv * wr[co]
            for co in range(Cout):
                o[co] += b[co]


@njit(**_JIT)
def depthwise_f32(x, w, b, out, stride, pad_t, pad_l, r0, r1):
    """x: (H, W, C); w: (KH, KW, C); out: (Ho, Wo, C)."""
    H, W, C = x.shape
    KH, KW, _ = w.shape
    Wo = out.shape[1]
    for oh in range(r0, r1):
        for ow in range(Wo):
            o = out[oh, ow]
            for c in range(C):
                o[c] = np.float32(0.0)
            for kh in range(KH):
                ih = oh * stride + kh - pad_t
                if ih < 0 or ih >= H:
                    continue
                for kw in range(KW):
                    iw = ow * stride + kw - pad_l
                    if iw < 0 or iw >= W:
                        continue
                    xr = x[ih, iw]
                    wr = w[kh, kw]
                    for c in range(C):
                        o[c] += xr[c] * wr[c]
            for c in range(C):
                o[c] += b[c]


@njit(**_JIT)
def fc_f32(x, wt, b, out, r0, r1):
    """x: (In,); wt: (In, Out) (transposed weights); out: (Out,)."""
    n_in = x.shape[0]
    for o in range(r0, r1):
        out[o] = np.float32(0.0)
    for i in range(n_in):
        xv = x[i]
        wr = wt[i]
        for o in range(r0, r1):
            out[o] += xv * wr[o]
    for o in range(r0, r1):
        out[o] += b[o]


@njit(**_JIT)
def relu6_f32(x, out, r0, r1):
    """x, out: 2-D row views; clamp to [0, 6]."""
    for r in range(r0, r1):
        xr = x[r]
        orow = out[r]
        for i in range(xr.shape[0]):
            v = xr[i]
            if v < 0:
                v = np.float32(0.0)
            elif v > 6:
                v = np.float32(6.0)
            orow[i] = v


@njit(**_JIT)
def add_f32(a, b, out, r0, r1):
    for r in range(r0, r1):
        ar = a[r]
        br = b[r]
        orow = out[r]
        for i in range(ar.shape[0]):
            orow[i] = ar[i] + br[i]


@njit(**_JIT)
def gap_f32(x, out, r0, r1):
    """x: (H, W, C); out: (C,); channels [r0, r1)."""
    H, W, _ = x.shape
    for c in range(r0, r1):
        out[c] = np.float32(0.0)
    for h in range(H):
        for w_ in range(W):
            xr = x[h, w_]
            for c in range(r0, r1):
                out[c] += xr[c]
    n = np.float32(H * W)
    for c in range(r0, r1):
        out[c] = out[c] / n


@njit(**_JIT)
def softmax_f32(x, out):
    """Softmax over a flat vector, computed in float64, stored as float32."""
    m = x[0]
    for i in range(1, x.shape[0]):
        if x[i] > m:
            m = x[i]
    s = 0.0
    for i in range(x.shape[0]):
        s += np.exp(np.float64(x[i]) - np.float64(m))
    for i in range(x.shape[0]):
        out[i] = np.float32(np.exp(np.float64(x[i]) - np.float64(m)) / s)


# -- int8 -------------------------------------------------------------------------
# numba widens int32 arithmetic to int64; the explicit np.int32(...) wraps keep
# accumulation in 32-bit lanes so the loops vectorize. Sums are exact either way.


@njit(**_JIT)
def _requant_row(acc, mult, out_zp, orow):
    lo = -128.0 - out_zp
    hi = 127.0 - out_zp
    for c in range(acc.shape[0]):
        v = min(max(np.float64(acc[c]) * mult[c], lo), hi)
        # truncation of v +/- 0.5 rounds half away from zero
        orow[c] = np.int8(np.int32(v + np.copysign(0.5, v)) + np.int32(out_zp))


@njit(**_JIT)
def quantize_input(x, scale, zp, out, r0, r1):
    for r in range(r0, r1):
        xr = x[r]
        orow = out[r]
        for i in range(xr.shape[0]):
            orow[i] = np.int8(_saturate(np.float64(xr[i]) / scale, -128.0 - zp, 127.0 - zp) + zp)


@njit(**_JIT)
def conv2d_i8(x, x_zp, w, bias, mult, out_zp, out, stride, pad_t, pad_l, r0, r1):
    """x: (H, W, Cin) int8; w: (KH, KW, Cin, Cout) int32."""
    zp = np.int32(x_zp)
    H, W, Cin = x.shape
    KH, KW, _, Cout = w.shape
    Wo = out.shape[1]
    acc = np.empty(Cout, np.int32)
    for oh in range(r0, r1):
        for ow in range(Wo):
            for co in range(Cout):
                acc[co] = bias[co]
            for kh in range(KH):
                ih = oh * stride + kh - pad_t
                if ih < 0 or ih >= H:
                    continue
                for kw in range(KW):
                    iw = ow * stride + kw - pad_l
                    if iw < 0 or iw >= W:
                        continue
                    xr = x[ih, iw]
                    for ci in range(Cin):
                        xv = np.int32(xr[ci]) - zp
                        wr = w[kh, kw, ci]
                        for co in range(Cout):
                            acc[co] += xv * wr[co]
            _requant_row(acc, mult, out_zp, out[oh, ow])


@njit(**_JIT)
def conv1x1_i8(x, w, bias_eff, mult, out_zp, out, r0, r1):
    """Unpadded pointwise conv, stride 1. w: (Cout, Cin) int8.

    ``bias_eff = bias - x_zp * sum(w[co])`` folds the input zero point, so the
    inner loop is a plain int8 dot product (int16 products, int32 sums).
    """
    Wo = out.shape[1]
    Cout, Cin = w.shape
    acc = np.empty(Cout, np.int32)
    for oh in range(r0, r1):
        for ow in range(Wo):
            xr = x[oh, ow]
            for co in range(Cout):
                wr = w[co]
                s = np.int32(0)
                for ci in range(Cin):
                    s = np.int32(s + np.int32(np.int16(xr[ci]) * np.int16(wr[ci])))
                acc[co] = np.int32(s + bias_eff[co])
            _requant_row(acc, mult, out_zp, out[oh, ow])


@njit(**_JIT)
def conv1x1_i8_outer(x, wt, bias_eff, mult, out_zp, out, r0, r1):
    """conv1x1_i8 for expanding layers: wt is (Cin, Cout) int8, the loop runs over Cout."""
    Wo = out.shape[1]
    Cin, Cout = wt.shape
    acc = np.empty(Cout, np.int32)
    for oh in range(r0, r1):
        for ow in range(Wo):
            xr = x[oh, ow]
            for co in range(Cout):
                acc[co] = bias_eff[co]
            for ci in range(Cin):
                xv = np.int32(xr[ci])
                wr = wt[ci]
                for co in range(Cout):
                    acc[co] += xv * wr[co]
            _requant_row(acc, mult, out_zp, out[oh, ow])


@njit(**_JIT)
def depthwise_i8(x, x_zp, w, bias, mult, out_zp, out, stride, pad_t, pad_l, r0, r1):
    """x: (H, W, C) int8; w: (KH, KW, C) int16."""
    zp = np.int32(x_zp)
    H, W, C = x.shape
    KH, KW, _ = w.shape
    Wo = out.shape[1]
    acc = np.empty(C, np.int32)
    for oh in range(r0, r1):
        for ow in range(Wo):
            for c in range(C):
                acc[c] = bias[c]
            for kh in range(KH):
                ih = oh * stride + kh - pad_t
                if ih < 0 or ih >= H:
                    continue
                for kw in range(KW):
                    iw = ow * stride + kw - pad_l
                    if iw < 0 or iw >= W:
                        continue
                    xr = x[ih, iw]
                    wr = w[kh, kw]
                    for c in range(C):
                        acc[c] += (xr[c] - zp) * wr[c]
            _requant_row(acc, mult, out_zp, out[oh, ow])


@njit(**_JIT)
def fc_i8(x, x_zp, w, bias, mult, out_zp, out, r0, r1):
    """x: (In,) int8; w: (Out, In) int8."""
    zp = np.int32(x_zp)
    n_in = x.shape[0]
    lo = -128.0 - out_zp
    hi = 127.0 - out_zp
    for o in range(r0, r1):
        wr = w[o]
        acc = np.int32(bias[o])
        for i in range(n_in):
            acc = np.int32(acc + np.int32((np.int32(x[i]) - zp) * np.int32(wr[i])))
        out[o] = np.int8(_saturate(np.float64(acc) * mult[o], lo, hi) + out_zp)


@njit(**_JIT)
def lut_i8(x, table, out, r0, r1):
    """Elementwise int8 -> int8 through a 256-entry table indexed by x + 128."""
    for r in range(r0, r1):
        xr = x[r]
        orow = out[r]
        for i in range(xr.shape[0]):
            orow[i] = table[np.int32(xr[i]) + 128]


@njit(**_JIT)
def relu6_table(in_scale, in_zp, out_scale, out_zp):
    table = np.empty(256, np.int8)
    for q in range(-128, 128):
        v = in_scale * (np.float64(q) - in_zp)
        if v < 0.0:
            v = 0.0
        elif v > 6.0:
            v = 6.0
        table[q + 128] = np.int8(_saturate(v / out_scale, -128.0 - out_zp, 127.0 - out_zp) + out_zp)
    return table


@njit(**_JIT)
def add_i8(a, a_scale, a_zp, b, b_scale, b_zp, out_scale, out_zp, out, r0, r1):
    for r in range(r0, r1):
        ar = a[r]
        br = b[r]
        orow = out[r]
        for i in range(ar.shape[0]):
            v = a_scale * (np.float64(ar[i]) - a_zp) + b_scale * (np.float64(br[i]) - b_zp)
            orow[i] = np.int8(_saturate(v / out_scale, -128.0 - out_zp, 127.0 - out_zp) + out_zp)


@njit(**_JIT)
def gap_i8(x, in_scale, in_zp, out_scale, out_zp, out, r0, r1):
    H, W, _ = x.shape
    n = H * W
    for c in range(r0, r1):
        s = np.int64(0)
        for h in range(H):
            for w_ in range(W):
                s += np.int64(x[h, w_, c])
        v = in_scale * (np.float64(s) - np.float64(n) * in_zp) / np.float64(n)
        out[c] = np.int8(_saturate(v / out_scale, -128.0 - out_zp, 127.0 - out_zp) + out_zp)


@njit(**_JIT)
def dequantize_vec(x, scale, zp, out):
    for i in range(x.shape[0]):
        out[i] = np.float32(scale * (np.float64(x[i]) - zp))
