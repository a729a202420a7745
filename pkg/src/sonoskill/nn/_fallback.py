"""Pure-numpy convolution kernels (im2col via strided views)."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _windows(x, kh, kw, stride):
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return as_strided(
        x,
        shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d_forward(x, w, b, stride):
    f, c, kh, kw = w.shape
    cols = _windows(x, kh, kw, stride)
    out = np.einsum("ncijkl,fckl->nfij", cols, w, optimize=True)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, w, dout, stride):
    f, c, kh, kw = w.shape
    cols = _windows(x, kh, kw, stride)
    db = dout.sum(axis=(0, 2, 3))
    dw = np.einsum("nfij,ncijkl->fckl", dout, cols, optimize=True)
    dcols = np.einsum("nfij,fckl->ncijkl", dout, w, optimize=True)
    dx = np.zeros_like(x)
    oh, ow = dout.shape[2], dout.shape[3]
    for ki in range(kh):
        for kj in range(kw):
            dx[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += dcols[
                :, :, :, :, ki, kj
            ]
    return dx, dw, db
