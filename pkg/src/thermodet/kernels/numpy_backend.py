"""Vectorized numpy kernels.

Fallback path used when numba is unavailable or when
THERMODET_KERNELS=numpy. Semantics match the numba backend: 3x3 kernels
use zero "same" padding, output H,W = ceil(H/stride), float kernels
accumulate in float64 and store in the input dtype, int8 kernels are
integer-only.
"""

import numpy as np


def _out_hw(h, w, stride):
    return (h - 1) // stride + 1, (w - 1) // stride + 1


def _windows3x3(xp, stride, ho, wo):
    # xp is the zero-padded (C, H+2, W+2) input; result (C, ho, wo, 3, 3)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    return win[:, ::stride, ::stride][:, :ho, :wo]


def conv3x3(x, w, b, stride=1):
    ho, wo = _out_hw(x.shape[1], x.shape[2], stride)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = _windows3x3(xp, stride, ho, wo).astype(np.float64)
    y = np.einsum("ihwkl,oikl->ohw", win, w.astype(np.float64))
    y += b.astype(np.float64)[:, None, None]
    return y.astype(x.dtype)


def depthwise3x3(x, w, b, stride=1):
    ho, wo = _out_hw(x.shape[1], x.shape[2], stride)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = _windows3x3(xp, stride, ho, wo).astype(np.float64)
    y = np.einsum("chwkl,ckl->chw", win, w.astype(np.float64))
    y += b.astype(np.float64)[:, None, None]
    return y.astype(x.dtype)


def pointwise(x, w, b):
    c, h, wd = x.shape
    y = w.astype(np.float64) @ x.reshape(c, h * wd).astype(np.float64)
    y += b.astype(np.float64)[:, None]
    return y.reshape(w.shape[0], h, wd).astype(x.dtype)


def _scatter3x3(t, shape, stride, ho, wo):
    # t: (C, ho, wo, 3, 3) contributions; returns unpadded (C, H, W) grad
    c, h, w = shape
    gxp = np.zeros((c, h + 2, w + 2), dtype=np.float64)
    for k in range(3):
        for l in range(3):
            gxp[:, k : k + stride * ho : stride, l : l + stride * wo : stride] += t[
                :, :, :, k, l
            ]
    return gxp[:, 1 : h + 1, 1 : w + 1]


def conv3x3_bwd(x, w, gy, stride=1):
    ho, wo = gy.shape[1], gy.shape[2]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = _windows3x3(xp, stride, ho, wo).astype(np.float64)
    gy64 = gy.astype(np.float64)
    w64 = w.astype(np.float64)
    gb = gy64.sum(axis=(1, 2))
    gw = np.einsum("ihwkl,ohw->oikl", win, gy64)
    t = np.einsum("ohw,oikl->ihwkl", gy64, w64)
    gx = _scatter3x3(t, x.shape, stride, ho, wo)
    return gx.astype(x.dtype), gw.astype(w.dtype), gb.astype(w.dtype)


def depthwise3x3_bwd(x, w, gy, stride=1):
    ho, wo = gy.shape[1], gy.shape[2]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = _windows3x3(xp, stride, ho, wo).astype(np.float64)
    gy64 = gy.astype(np.float64)
    w64 = w.astype(np.float64)
    gb = gy64.sum(axis=(1, 2))
    gw = np.einsum("chwkl,chw->ckl", win, gy64)
    t = np.einsum("chw,ckl->chwkl", gy64, w64)
    gx = _scatter3x3(t, x.shape, stride, ho, wo)
    return gx.astype(x.dtype), gw.astype(w.dtype), gb.astype(w.dtype)


def pointwise_bwd(x, w, gy):
    c, h, wd = x.shape
    x2 = x.reshape(c, h * wd).astype(np.float64)
    gy2 = gy.reshape(gy.shape[0], h * wd).astype(np.float64)
    w64 = w.astype(np.float64)
    gb = gy2.sum(axis=1)
    gw = gy2 @ x2.T
    gx = (w64.T @ gy2).reshape(c, h, wd)
    return gx.astype(x.dtype), gw.astype(w.dtype), gb.astype(w.dtype)


def _requantize(acc, mult, rshift):
    # fixed-point multiply + rounding right shift, half away from zero
    p = acc * mult
    half = np.int64(1) << (rshift - 1)
    return np.where(p >= 0, (p + half) >> rshift, -((-p + half) >> rshift))


def conv3x3_int8(xq, zp_in, wq, bias, mult, rshift, zp_out, act_min, act_max, stride=1):
    ho, wo = _out_hw(xq.shape[1], xq.shape[2], stride)
    xi = xq.astype(np.int64) - zp_in
    xp = np.pad(xi, ((0, 0), (1, 1), (1, 1)))
    win = _windows3x3(xp, stride, ho, wo)
    acc = np.einsum("ihwkl,oikl->ohw", win, wq.astype(np.int64))
    acc += bias.astype(np.int64)[:, None, None]
    y = _requantize(acc, mult.astype(np.int64)[:, None, None], rshift.astype(np.int64)[:, None, None])
    y += zp_out
    return np.clip(y, act_min, act_max).astype(np.int8)


def depthwise3x3_int8(
    xq, zp_in, wq, bias, mult, rshift, zp_out, act_min, act_max, stride=1
):
    ho, wo = _out_hw(xq.shape[1], xq.shape[2], stride)
    xi = xq.astype(np.int64) - zp_in
    xp = np.pad(xi, ((0, 0), (1, 1), (1, 1)))
    win = _windows3x3(xp, stride, ho, wo)
    acc = np.einsum("chwkl,ckl->chw", win, wq.astype(np.int64))
    acc += bias.astype(np.int64)[:, None, None]
    y = _requantize(acc, mult.astype(np.int64)[:, None, None], rshift.astype(np.int64)[:, None, None])
    y += zp_out
    return np.clip(y, act_min, act_max).astype(np.int8)


def pointwise_int8(xq, zp_in, wq, bias, mult, rshift, zp_out, act_min, act_max):
    c, h, wd = xq.shape
    xi = xq.reshape(c, h * wd).astype(np.int64) - zp_in
    acc = wq.astype(np.int64) @ xi
    acc += bias.astype(np.int64)[:, None]
    y = _requantize(acc, mult.astype(np.int64)[:, None], rshift.astype(np.int64)[:, None])
    y += zp_out
    return np.clip(y, act_min, act_max).astype(np.int8).reshape(wq.shape[0], h, wd)
