# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for NCHW tensors.

Column layout is ``(B, C*K*K, Ho*Wo)`` with row index ``(c*K + ky)*K + kx``.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline void _valid_range(Py_ssize_t n_out, Py_ssize_t extent, int stride, Py_ssize_t offset,
                              Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output positions o in [lo, hi) satisfy 0 <= o*stride + offset < extent
    cdef Py_ssize_t a = 0, b = n_out
    if offset < 0:
        a = (-offset + stride - 1) // stride
    if (n_out - 1) * stride + offset >= extent:
        b = (extent - offset + stride - 1) // stride if extent > offset else 0
    if b < a:
        b = a
    lo[0] = a
    hi[0] = b


def im2col(const floating[:, :, :, ::1] x, int k, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t b_n = x.shape[0], c_n = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((b_n, c_n * k * k, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t b, c, ky, kx, oy, ox, iy, row, y0, y1, x0, x1
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for b in range(b_n):
            for c in range(c_n):
                for ky in range(k):
                    _valid_range(ho, h, stride, ky - pad, &y0, &y1)
                    for kx in range(k):
                        _valid_range(wo, w, stride, kx - pad, &x0, &x1)
                        row = (c * k + ky) * k + kx
                        for oy in range(y0, y1):
                            iy = oy * stride + ky - pad
                            dst = &cols[b, row, oy * wo]
                            src = &x[b, c, iy, 0]
                            if stride == 1:
                                for ox in range(x0, x1):
                                    dst[ox] = src[ox + kx - pad]
                            else:
                                for ox in range(x0, x1):
                                    dst[ox] = src[ox * stride + kx - pad]
    return out


def col2im(const floating[:, :, ::1] cols, int c_n, int h, int w, int k, int stride, int pad,
           int ho, int wo):
    cdef Py_ssize_t b_n = cols.shape[0]
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((b_n, c_n, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, c, ky, kx, oy, ox, iy, row, y0, y1, x0, x1
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for b in range(b_n):
            for c in range(c_n):
                for ky in range(k):
                    _valid_range(ho, h, stride, ky - pad, &y0, &y1)
                    for kx in range(k):
                        _valid_range(wo, w, stride, kx - pad, &x0, &x1)
                        row = (c * k + ky) * k + kx
                        for oy in range(y0, y1):
                            iy = oy * stride + ky - pad
                            src = &cols[b, row, oy * wo]
                            dst = &dx[b, c, iy, 0]
                            if stride == 1:
                                for ox in range(x0, x1):
                                    dst[ox + kx - pad] += src[ox]
                            else:
                                for ox in range(x0, x1):
                                    dst[ox * stride + kx - pad] += src[ox]
    return out
