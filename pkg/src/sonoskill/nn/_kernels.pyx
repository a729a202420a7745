# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct-convolution kernels (valid padding, square stride).

Loops are ordered so the innermost one walks an output row with a fixed
weight, which keeps the hot loop free of index arithmetic on the kernel.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, double[::1] b, int stride):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = (H - KH) // stride + 1, OW = (W - KW) // stride + 1
    out_arr = np.empty((N, F, OH, OW), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, f, c, i, j, ki, kj
    cdef double wv
    cdef double *orow
    cdef double *xrow
    with nogil:
        for n in range(N):
            for f in range(F):
                for i in range(OH):
                    for j in range(OW):
                        out[n, f, i, j] = b[f]
                for c in range(C):
                    for ki in range(KH):
                        for kj in range(KW):
                            wv = w[f, c, ki, kj]
                            for i in range(OH):
                                orow = &out[n, f, i, 0]
                                xrow = &x[n, c, i * stride + ki, kj]
                                for j in range(OW):
                                    orow[j] += wv * xrow[j * stride]
    return out_arr


def conv2d_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, double[:, :, :, ::1] dout, int stride):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t F = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = dout.shape[2], OW = dout.shape[3]
    dx_arr = np.zeros((x.shape[0], x.shape[1], x.shape[2], x.shape[3]), dtype=np.float64)
    dw_arr = np.zeros((F, C, KH, KW), dtype=np.float64)
    db_arr = np.zeros(F, dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t n, f, c, i, j, ki, kj
    cdef double wv, acc
    cdef double *grow
    cdef double *xrow
    cdef double *dxrow
    with nogil:
        for n in range(N):
            for f in range(F):
                acc = 0.0
                for i in range(OH):
                    grow = &dout[n, f, i, 0]
                    for j in range(OW):
                        acc = acc + grow[j]
                db[f] += acc
                for c in range(C):
                    for ki in range(KH):
                        for kj in range(KW):
                            wv = w[f, c, ki, kj]
                            acc = 0.0
                            for i in range(OH):
                                grow = &dout[n, f, i, 0]
                                xrow = &x[n, c, i * stride + ki, kj]
                                dxrow = &dx[n, c, i * stride + ki, kj]
                                for j in range(OW):
                                    acc = acc + grow[j] * xrow[j * stride]
                                    dxrow[j * stride] += wv * grow[j]
                            dw[f, c, ki, kj] += acc
    return dx_arr, dw_arr, db_arr
