# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels for float64 2D convolution.

Both functions produce results bit-identical to the numpy fallback in
``_kernels_py``: im2col is a pure copy, and col2im accumulates the
contributions to each input cell in the same kernel-offset order.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, Py_ssize_t kf, Py_ssize_t kt,
           Py_ssize_t sf, Py_ssize_t st):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t Hp = xp.shape[2], Wp = xp.shape[3]
    cdef Py_ssize_t Fo = (Hp - kf) // sf + 1
    cdef Py_ssize_t To = (Wp - kt) // st + 1
    out_arr = np.empty((B, Fo, To, C, kf, kt), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, fo, to, c, i, j, f0, t0
    with nogil:
        for b in range(B):
            for fo in range(Fo):
                f0 = fo * sf
                for to in range(To):
                    t0 = to * st
                    for c in range(C):
                        for i in range(kf):
                            for j in range(kt):
                                out[b, fo, to, c, i, j] = xp[b, c, f0 + i, t0 + j]
    return out_arr


def col2im(const double[:, :, :, :, :, ::1] cols, Py_ssize_t Hp, Py_ssize_t Wp,
           Py_ssize_t sf, Py_ssize_t st):
    cdef Py_ssize_t B = cols.shape[0], Fo = cols.shape[1], To = cols.shape[2]
    cdef Py_ssize_t C = cols.shape[3], kf = cols.shape[4], kt = cols.shape[5]
    out_arr = np.zeros((B, C, Hp, Wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, fo, to, c, i, j, f0, t0
    # cols is read in memory order; for any one output cell this visits the
    # kernel offsets (i, j) in descending order, matching the numpy fallback
    with nogil:
        for b in range(B):
            for fo in range(Fo):
                f0 = fo * sf
                for to in range(To):
                    t0 = to * st
                    for c in range(C):
                        for i in range(kf):
                            for j in range(kt):
                                out[b, c, f0 + i, t0 + j] += cols[b, fo, to, c, i, j]
    return out_arr
