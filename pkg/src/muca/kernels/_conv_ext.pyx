# cython: language_level=3
"""Compiled im2col / col2im for k x k convolutions.

Column layout is (N, C*k*k, Ho*Wo) with the row axis ordered (channel,
kernel row, kernel col), matching ``weight.reshape(OutC, -1)``, so a conv
is ``weight_matrix @ cols`` with the result already in NCHW order.
col2im accumulates each input element's contributions in (kernel row,
kernel col) order starting from zero, which is the order the numpy
fallback uses, so both backends agree bit for bit.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.string cimport memcpy, memset

cnp.import_array()


cdef inline Py_ssize_t _first_valid(Py_ssize_t offset, Py_ssize_t stride) nogil:
    # smallest o >= 0 with o * stride + offset >= 0
    if offset >= 0:
        return 0
    return (-offset + stride - 1) // stride


cdef inline Py_ssize_t _last_valid(Py_ssize_t offset, Py_ssize_t stride,
                                   Py_ssize_t size, Py_ssize_t n_out) nogil:
    # one past the largest o < n_out with o * stride + offset < size
    cdef Py_ssize_t hi
    if size - 1 - offset < 0:
        return 0
    hi = (size - 1 - offset) // stride + 1
    return hi if hi < n_out else n_out


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c * k * k, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, ki, kj, oy, ox, row, oy0, oy1, ox0, ox1, ix
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    oy0 = _first_valid(ki - pad, stride)
                    oy1 = _last_valid(ki - pad, stride, h, ho)
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        ox0 = _first_valid(kj - pad, stride)
                        ox1 = _last_valid(kj - pad, stride, w, wo)
                        dst = &cols[b, row, 0]
                        memset(dst, 0, ho * wo * sizeof(floating))
                        if ox1 <= ox0:
                            continue
                        for oy in range(oy0, oy1):
                            src = &x[b, ch, oy * stride + ki - pad, 0]
                            ix = ox0 * stride + kj - pad
                            if stride == 1:
                                memcpy(&dst[oy * wo + ox0], &src[ix],
                                       (ox1 - ox0) * sizeof(floating))
                                continue
                            for ox in range(ox0, ox1):
                                dst[oy * wo + ox] = src[ix]
                                ix += stride
    return out


def col2im(floating[:, :, ::1] cols, tuple shape, int k, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    if cols.shape[0] != n or cols.shape[1] != c * k * k or cols.shape[2] != ho * wo:
        raise ValueError("column buffer does not match the requested image shape")
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, ki, kj, oy, ox, row, oy0, oy1, ox0, ox1, ix
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    oy0 = _first_valid(ki - pad, stride)
                    oy1 = _last_valid(ki - pad, stride, h, ho)
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        ox0 = _first_valid(kj - pad, stride)
                        ox1 = _last_valid(kj - pad, stride, w, wo)
                        src = &cols[b, row, 0]
                        for oy in range(oy0, oy1):
                            dst = &dx[b, ch, oy * stride + ki - pad, 0]
                            ix = ox0 * stride + kj - pad
                            for ox in range(ox0, ox1):
                                dst[ix] += src[oy * wo + ox]
                                ix += stride
    return out
