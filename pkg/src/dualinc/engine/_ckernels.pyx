# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch extraction kernels for conv2d.

Same layout and accumulation order as ``_kernels_py``.
"""
import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
           Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((c * kh * kw, n * ho * wo), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t ci, i, j, b, y, x, row, col
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    for b in range(n):
                        for y in range(ho):
                            col = (b * ho + y) * wo
                            for x in range(wo):
                                out[row, col + x] = xp[b, ci, i + stride * y, j + stride * x]
    return out_arr


def col2im(cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo):
    cols = np.ascontiguousarray(cols)
    if cols.dtype == np.float32:
        return _col2im[float](cols, n, c, hp, wp, kh, kw, stride, ho, wo)
    return _col2im[double](np.asarray(cols, dtype=np.float64), n, c, hp, wp, kh, kw, stride, ho, wo)


cdef object _col2im(real[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t hp, Py_ssize_t wp,
                    Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo):
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ci, i, j, b, y, x, row, col
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    for b in range(n):
                        for y in range(ho):
                            col = (b * ho + y) * wo
                            for x in range(wo):
                                out[b, ci, i + stride * y, j + stride * x] += cols[row, col + x]
    return out_arr
