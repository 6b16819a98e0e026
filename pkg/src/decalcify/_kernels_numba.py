"""Numba-compiled kernels for the 3D conv/pool hot loops.

Signatures mirror ``_kernels_numpy``.  Inner loops run along the
contiguous fastest axis with the weight scalar hoisted so LLVM can
vectorize them.  Every output element is written by exactly one prange
iteration (conv backward-input parallelizes over (n, ci) slabs), so
results are deterministic regardless of thread count.  ``cache=True``
persists compilation across processes.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_forward(xp, w, b, stride, out):
    n_, co_, do, ho, wo = out.shape
    ci_ = xp.shape[1]
    k = w.shape[2]
    s = stride
    for idx in prange(n_ * co_ * do):
        n = idx // (co_ * do)
        rem = idx % (co_ * do)
        co = rem // do
        d = rem % do
        for h in range(ho):
            orow = out[n, co, d, h]
            for ww in range(wo):
                orow[ww] = b[co]
            for ci in range(ci_):
                for kd in range(k):
                    for kh in range(k):
                        xrow = xp[n, ci, d * s + kd, h * s + kh]
                        for kw in range(k):
                            wv = w[co, ci, kd, kh, kw]
                            if s == 1:
                                for ww in range(wo):
                                    orow[ww] += wv * xrow[ww + kw]
                            else:
                                for ww in range(wo):
                                    orow[ww] += wv * xrow[ww * s + kw]
    return out


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_backward_input(gout, w, stride, gxp):
    n_, ci_, dp, hp, wp = gxp.shape
    co_, do, ho, wo = gout.shape[1], gout.shape[2], gout.shape[3], gout.shape[4]
    k = w.shape[2]
    s = stride
    # gather per padded-input row: each row has exactly one writer
    for idx in prange(n_ * ci_ * dp):
        n = idx // (ci_ * dp)
        rem = idx % (ci_ * dp)
        ci = rem // dp
        pd = rem % dp
        for ph in range(hp):
            xrow = gxp[n, ci, pd, ph]
            for kd in range(k):
                d, rd = divmod(pd - kd, s)
                if rd != 0 or d < 0 or d >= do:
                    continue
                for kh in range(k):
                    h, rh = divmod(ph - kh, s)
                    if rh != 0 or h < 0 or h >= ho:
                        continue
                    for co in range(co_):
                        grow = gout[n, co, d, h]
                        for kw in range(k):
                            wv = w[co, ci, kd, kh, kw]
                            if s == 1:
                                for ww in range(wo):
                                    xrow[ww + kw] += wv * grow[ww]
                            else:
                                for ww in range(wo):
                                    xrow[ww * s + kw] += wv * grow[ww]
    return gxp


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_backward_weights(gout, xp, stride, gw, gb):
    co_, ci_, k = gw.shape[0], gw.shape[1], gw.shape[2]
    n_, _, do, ho, wo = gout.shape
    s = stride
    # each thread owns one output channel: all its gw/gb entries
    for co in prange(co_):
        bacc = 0.0
        for n in range(n_):
            for d in range(do):
                for h in range(ho):
                    grow = gout[n, co, d, h]
                    for ww in range(wo):
                        bacc += grow[ww]
                    for ci in range(ci_):
                        for kd in range(k):
                            for kh in range(k):
                                xrow = xp[n, ci, d * s + kd, h * s + kh]
                                for kw in range(k):
                                    acc = 0.0
                                    if s == 1:
                                        for ww in range(wo):
                                            acc += grow[ww] * xrow[ww + kw]
                                    else:
                                        for ww in range(wo):
                                            acc += grow[ww] * xrow[ww * s + kw]
                                    gw[co, ci, kd, kh, kw] += acc
        gb[co] = bacc
    return gw, gb


@njit(parallel=True, cache=True)
def maxpool3d_forward(x, out, argmax):
    n_, c_, do, ho, wo = out.shape
    h_in, w_in = x.shape[3], x.shape[4]
    for idx in prange(n_ * c_ * do):
        n = idx // (c_ * do)
        rem = idx % (c_ * do)
        c = rem // do
        d = rem % do
        for h in range(ho):
            for ww in range(wo):
                best = x[n, c, 2 * d, 2 * h, 2 * ww]
                besti = (2 * d * h_in + 2 * h) * w_in + 2 * ww
                for kd in range(2):
                    for kh in range(2):
                        for kw in range(2):
                            v = x[n, c, 2 * d + kd, 2 * h + kh, 2 * ww + kw]
                            if v > best:  # strict: first index wins ties
                                best = v
                                besti = ((2 * d + kd) * h_in + 2 * h + kh) * w_in \
                                    + 2 * ww + kw
                out[n, c, d, h, ww] = best
                argmax[n, c, d, h, ww] = besti
    return out, argmax


@njit(parallel=True, cache=True)
def maxpool3d_backward(gout, argmax, gx):
    n_, c_, do, ho, wo = gout.shape
    h_in, w_in = gx.shape[3], gx.shape[4]
    for idx in prange(n_ * c_):
        n = idx // c_
        c = idx % c_
        for d in range(do):
            for h in range(ho):
                for ww in range(wo):
                    flat = argmax[n, c, d, h, ww]
                    iw = flat % w_in
                    ih = (flat // w_in) % h_in
                    idd = flat // (w_in * h_in)
                    gx[n, c, idd, ih, iw] += gout[n, c, d, h, ww]
    return gx
