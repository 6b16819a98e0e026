"""Pure-numpy reference kernels for the 3D conv/pool hot loops.

Each kernel here has an identical signature to its numba twin in
``_kernels_numba``; ``backend`` picks one set at import time.  The conv
kernels work on pre-padded inputs so padding policy lives in one place
(the caller in ``tensor``).

Convolutions are computed as a sum of 27 (k^3) shifted channel-mixing
products, which keeps memory flat (no im2col buffer) and lets BLAS do
the channel contraction.
"""

import numpy as np


def conv3d_forward(xp, w, b, stride, out):
    """Cross-correlate padded input ``xp`` (N,Ci,Dp,Hp,Wp) with ``w``
    (Co,Ci,k,k,k), add bias, write into ``out`` (N,Co,Do,Ho,Wo)."""
    k = w.shape[2]
    _, _, do, ho, wo = out.shape
    s = stride
    out[:] = 0.0
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                xs = xp[:, :, kd:kd + s * do:s, kh:kh + s * ho:s, kw:kw + s * wo:s]
                out += np.einsum("oc,ncdhw->nodhw", w[:, :, kd, kh, kw], xs,
                                 optimize=True)
    out += b.reshape(1, -1, 1, 1, 1)
    return out


def conv3d_backward_input(gout, w, stride, gxp):
    """Scatter output gradient back onto the padded input. ``gxp`` must
    be zero-initialized with the padded input's shape."""
    k = w.shape[2]
    _, _, do, ho, wo = gout.shape
    s = stride
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                gxp[:, :, kd:kd + s * do:s, kh:kh + s * ho:s, kw:kw + s * wo:s] += \
                    np.einsum("oc,nodhw->ncdhw", w[:, :, kd, kh, kw], gout,
                              optimize=True)
    return gxp


def conv3d_backward_weights(gout, xp, stride, gw, gb):
    k = gw.shape[2]
    _, _, do, ho, wo = gout.shape
    s = stride
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                xs = xp[:, :, kd:kd + s * do:s, kh:kh + s * ho:s, kw:kw + s * wo:s]
                gw[:, :, kd, kh, kw] = np.einsum("nodhw,ncdhw->oc", gout, xs,
                                                 optimize=True)
    gb[:] = gout.sum(axis=(0, 2, 3, 4))
    return gw, gb


def maxpool3d_forward(x, out, argmax):
    """2x2x2 max pooling, stride 2.  ``argmax`` receives the flat spatial
    index of each window maximum (first occurrence in scan order wins)."""
    n, c, d, h, w = x.shape
    windows = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    windows = windows.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
        n, c, d // 2, h // 2, w // 2, 8)
    flat = windows.argmax(axis=-1)  # first max in (kd,kh,kw) scan order
    out[:] = np.take_along_axis(windows, flat[..., None], axis=-1)[..., 0]
    kd, r = np.divmod(flat, 4)
    kh, kw = np.divmod(r, 2)
    dd = np.arange(d // 2).reshape(-1, 1, 1) * 2
    hh = np.arange(h // 2).reshape(1, -1, 1) * 2
    ww = np.arange(w // 2).reshape(1, 1, -1) * 2
    argmax[:] = ((dd + kd) * h + (hh + kh)) * w + (ww + kw)
    return out, argmax


def maxpool3d_backward(gout, argmax, gx):
    """Route each output gradient to its argmax voxel. ``gx`` must be a
    zero-initialized array of the pooling input's shape."""
    n, c, d, h, w = gx.shape
    gxf = gx.reshape(n, c, d * h * w)
    np.put_along_axis(gxf, argmax.reshape(n, c, -1),
                      gout.reshape(n, c, -1), axis=2)
    return gx
