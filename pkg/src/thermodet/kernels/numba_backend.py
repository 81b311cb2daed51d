"""Numba-jitted loop kernels, the default execution path.

Loops are written per output element; float kernels accumulate in
float64 and store in the input dtype, int8 kernels accumulate in int64
so both backends agree bit-for-bit.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv3x3(x, w, b, stride=1):
    cin, h, wd = x.shape
    cout = w.shape[0]
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    y = np.empty((cout, ho, wo), dtype=x.dtype)
    for o in range(cout):
        for oh in range(ho):
            for ow in range(wo):
                acc = 0.0
                hb = oh * stride - 1
                wb = ow * stride - 1
                for i in range(cin):
                    for k in range(3):
                        hh = hb + k
                        if hh < 0 or hh >= h:
                            continue
                        for l in range(3):
                            ww = wb + l
                            if 0 <= ww < wd:
                                acc += x[i, hh, ww] * w[o, i, k, l]
                y[o, oh, ow] = acc + b[o]
    return y


@njit(cache=True)
def depthwise3x3(x, w, b, stride=1):
    c, h, wd = x.shape
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    y = np.empty((c, ho, wo), dtype=x.dtype)
    for i in range(c):
        for oh in range(ho):
            for ow in range(wo):
                acc = 0.0
                hb = oh * stride - 1
                wb = ow * stride - 1
                for k in range(3):
                    hh = hb + k
                    if hh < 0 or hh >= h:
                        continue
                    for l in range(3):
                        ww = wb + l
                        if 0 <= ww < wd:
                            acc += x[i, hh, ww] * w[i, k, l]
                y[i, oh, ow] = acc + b[i]
    return y


@njit(cache=True)
def pointwise(x, w, b):
    # pixel-contiguous inner loops so LLVM vectorizes them
    cin, h, wd = x.shape
    cout = w.shape[0]
    hw = h * wd
    x2 = x.reshape(cin, hw)
    y = np.empty((cout, hw), dtype=x.dtype)
    acc = np.empty(hw, dtype=np.float64)
    for o in range(cout):
        for k in range(hw):
            acc[k] = b[o]
        for i in range(cin):
            wv = w[o, i]
            xr = x2[i]
            for k in range(hw):
                acc[k] += wv * xr[k]
        for k in range(hw):
            y[o, k] = acc[k]
    return y.reshape(cout, h, wd)


@njit(cache=True)
def conv3x3_bwd(x, w, gy, stride=1):
    cin, h, wd = x.shape
    cout = w.shape[0]
    ho, wo = gy.shape[1], gy.shape[2]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    gb = np.zeros(cout, dtype=w.dtype)
    for o in range(cout):
        for oh in range(ho):
            for ow in range(wo):
                g = gy[o, oh, ow]
                gb[o] += g
                hb = oh * stride - 1
                wb = ow * stride - 1
                for i in range(cin):
                    for k in range(3):
                        hh = hb + k
                        if hh < 0 or hh >= h:
                            continue
                        for l in range(3):
                            ww = wb + l
                            if 0 <= ww < wd:
                                gw[o, i, k, l] += g * x[i, hh, ww]
                                gx[i, hh, ww] += g * w[o, i, k, l]
    return gx, gw, gb


@njit(cache=True)
def depthwise3x3_bwd(x, w, gy, stride=1):
    c, h, wd = x.shape
    ho, wo = gy.shape[1], gy.shape[2]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    gb = np.zeros(c, dtype=w.dtype)
    for i in range(c):
        for oh in range(ho):
            for ow in range(wo):
                g = gy[i, oh, ow]
                gb[i] += g
                hb = oh * stride - 1
                wb = ow * stride - 1
                for k in range(3):
                    hh = hb + k
                    if hh < 0 or hh >= h:
                        continue
                    for l in range(3):
                        ww = wb + l
                        if 0 <= ww < wd:
                            gw[i, k, l] += g * x[i, hh, ww]
                            gx[i, hh, ww] += g * w[i, k, l]
    return gx, gw, gb


@njit(cache=True)
def pointwise_bwd(x, w, gy):
    cin, h, wd = x.shape
    cout = w.shape[0]
    hw = h * wd
    x2 = x.reshape(cin, hw)
    gy2 = gy.reshape(cout, hw)
    gx = np.zeros((cin, hw), dtype=x.dtype)
    gw = np.zeros_like(w)
    gb = np.zeros(cout, dtype=w.dtype)
    for o in range(cout):
        gr = gy2[o]
        s = 0.0
        for k in range(hw):
            s += gr[k]
        gb[o] = s
        for i in range(cin):
            xr = x2[i]
            gxr = gx[i]
            wv = w[o, i]
            acc = 0.0
            for k in range(hw):
                acc += gr[k] * xr[k]
                gxr[k] += gr[k] * wv
            gw[o, i] = acc
    return gx.reshape(cin, h, wd), gw, gb


@njit(cache=True, inline="always")
def _rrshift(v, n):
    half = np.int64(1) << (n - np.int64(1))
    if v >= 0:
        return (v + half) >> n
    return -((-v + half) >> n)


@njit(cache=True)
def conv3x3_int8(xq, zp_in, wq, bias, mult, rshift, zp_out, act_min, act_max, stride=1):
    cin, h, wd = xq.shape
    cout = wq.shape[0]
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    y = np.empty((cout, ho, wo), dtype=np.int8)
    zin = np.int64(zp_in)
    for o in range(cout):
        m = np.int64(mult[o])
        n = np.int64(rshift[o])
        bo = np.int64(bias[o])
        for oh in range(ho):
            for ow in range(wo):
                acc = bo
                hb = oh * stride - 1
                wb = ow * stride - 1
                for i in range(cin):
                    for k in range(3):
                        hh = hb + k
                        if hh < 0 or hh >= h:
                            continue
                        for l in range(3):
                            ww = wb + l
                            if 0 <= ww < wd:
                                acc += (np.int64(xq[i, hh, ww]) - zin) * np.int64(
                                    wq[o, i, k, l]
                                )
                v = _rrshift(acc * m, n) + zp_out
                if v < act_min:
                    v = act_min
                if v > act_max:
                    v = act_max
                y[o, oh, ow] = v
    return y


@njit(cache=True)
def depthwise3x3_int8(
    xq, zp_in, wq, bias, mult, rshift, zp_out, act_min, act_max, stride=1
):
    c, h, wd = xq.shape
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    y = np.empty((c, ho, wo), dtype=np.int8)
    zin = np.int64(zp_in)
    for i in range(c):
        m = np.int64(mult[i])
        n = np.int64(rshift[i])
        bi = np.int64(bias[i])
        for oh in range(ho):
            for ow in range(wo):
                acc = bi
                hb = oh * stride - 1
                wb = ow * stride - 1
                for k in range(3):
                    hh = hb + k
                    if hh < 0 or hh >= h:
                        continue
                    for l in range(3):
                        ww = wb + l
                        if 0 <= ww < wd:
                            acc += (np.int64(xq[i, hh, ww]) - zin) * np.int64(
                                wq[i, k, l]
                            )
                v = _rrshift(acc * m, n) + zp_out
                if v < act_min:
                    v = act_min
                if v > act_max:
                    v = act_max
                y[i, oh, ow] = v
    return y


@njit(cache=True)
def pointwise_int8(xq, zp_in, wq, bias, mult, rshift, zp_out, act_min, act_max):
    cin, h, wd = xq.shape
    cout = wq.shape[0]
    hw = h * wd
    x2 = xq.reshape(cin, hw)
    y = np.empty((cout, hw), dtype=np.int8)
    zin = np.int64(zp_in)
    acc = np.empty(hw, dtype=np.int64)
    for o in range(cout):
        m = np.int64(mult[o])
        n = np.int64(rshift[o])
        bo = np.int64(bias[o])
        for k in range(hw):
            acc[k] = bo
        for i in range(cin):
            wv = np.int64(wq[o, i])
            xr = x2[i]
            for k in range(hw):
                acc[k] += (np.int64(xr[k]) - zin) * wv
        for k in range(hw):
            v = _rrshift(acc[k] * m, n) + zp_out
            if v < act_min:
                v = act_min
            if v > act_max:
                v = act_max
            y[o, k] = v
    return y.reshape(cout, h, wd)
