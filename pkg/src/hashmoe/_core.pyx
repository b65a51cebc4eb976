# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: multi-grid hash encoding, its table gradient, fused Adam.

Every grid lookup goes through one layout triple indexed by ``(grid, level)``:
``res`` (lattice resolution), ``entries`` (rows in that level's table) and
``offsets`` (first row of that level inside the shared table). A single grid
is the ``E == 1`` case; the expert pyramid passes its per-point expert id so
the expert index is folded straight into the row offset.

The arithmetic order mirrors ``hashmoe._fallback`` so both backends encode
bit for bit identically; gradients agree to rounding.
"""

import numpy as np

from libc.math cimport floor, sqrt
from libc.stdint cimport int32_t, int64_t, uint32_t

ctypedef fused real:
    float
    double


cdef inline int64_t _row(int64_t cx, int64_t cy, int64_t cz, int64_t res,
                         int64_t entries, int64_t offset) noexcept nogil:
    cdef int64_t stride = res + 1
    cdef uint32_t h
    if stride * stride * stride <= entries:
        return offset + cx + stride * (cy + stride * cz)
    h = (<uint32_t>cx) ^ ((<uint32_t>cy) * <uint32_t>2654435761u) ^ ((<uint32_t>cz) * <uint32_t>805459861u)
    return offset + <int64_t>(h & <uint32_t>(entries - 1))


def row_index(int64_t cx, int64_t cy, int64_t cz, int64_t res, int64_t entries, int64_t offset):
    return _row(cx, cy, cz, res, entries, offset)


def encode(real[:, ::1] table, real[:, ::1] points, int32_t[::1] grid_ids,
           int32_t[:, ::1] res, int64_t[:, ::1] entries, int64_t[:, ::1] offsets,
           real[:, ::1] out):
    """Trilinear features of every point at every level, ``out`` (N, L*F).

    Positions and weights are computed in double and each level is
    accumulated in double before the single rounding to ``out``.
    """
    cdef double[::1] acc = np.zeros(table.shape[1])
    cdef Py_ssize_t n_pts = points.shape[0]
    cdef Py_ssize_t n_levels = res.shape[1]
    cdef Py_ssize_t n_feat = table.shape[1]
    cdef Py_ssize_t n, l, k, f
    cdef int32_t g
    cdef int64_t r, cx, cy, cz, row
    cdef double px, py, pz, wx, wy, wz, w
    with nogil:
        for n in range(n_pts):
            g = grid_ids[n]
            for l in range(n_levels):
                r = res[g, l]
                px = <double>points[n, 0] * <double>r
                py = <double>points[n, 1] * <double>r
                pz = <double>points[n, 2] * <double>r
                cx = <int64_t>floor(px)
                cy = <int64_t>floor(py)
                cz = <int64_t>floor(pz)
                if cx > r - 1:
                    cx = r - 1
                if cy > r - 1:
                    cy = r - 1
                if cz > r - 1:
                    cz = r - 1
                if cx < 0:
                    cx = 0
                if cy < 0:
                    cy = 0
                if cz < 0:
                    cz = 0
                wx = px - <double>cx
                wy = py - <double>cy
                wz = pz - <double>cz
                for f in range(n_feat):
                    acc[f] = 0
                for k in range(8):
                    w = (wx if k & 1 else 1.0 - wx) * (wy if k & 2 else 1.0 - wy)
                    w = w * (wz if k & 4 else 1.0 - wz)
                    row = _row(cx + (k & 1), cy + ((k >> 1) & 1), cz + ((k >> 2) & 1),
                               r, entries[g, l], offsets[g, l])
                    for f in range(n_feat):
                        acc[f] += w * <double>table[row, f]
                for f in range(n_feat):
                    out[n, l * n_feat + f] = <real>acc[f]


def encode_backward(real[:, ::1] grad_table, real[:, ::1] points, int32_t[::1] grid_ids,
                    int32_t[:, ::1] res, int64_t[:, ::1] entries, int64_t[:, ::1] offsets,
                    real[:, ::1] dfeat):
    cdef Py_ssize_t n_pts = points.shape[0]
    cdef Py_ssize_t n_levels = res.shape[1]
    cdef Py_ssize_t n_feat = grad_table.shape[1]
    cdef Py_ssize_t n, l, k, f
    cdef int32_t g
    cdef int64_t r, cx, cy, cz, row
    cdef double px, py, pz, wx, wy, wz, w
    with nogil:
        for n in range(n_pts):
            g = grid_ids[n]
            for l in range(n_levels):
                r = res[g, l]
                px = <double>points[n, 0] * <double>r
                py = <double>points[n, 1] * <double>r
                pz = <double>points[n, 2] * <double>r
                cx = <int64_t>floor(px)
                cy = <int64_t>floor(py)
                cz = <int64_t>floor(pz)
                if cx > r - 1:
                    cx = r - 1
                if cy > r - 1:
                    cy = r - 1
                if cz > r - 1:
                    cz = r - 1
                if cx < 0:
                    cx = 0
                if cy < 0:
                    cy = 0
                if cz < 0:
                    cz = 0
                wx = px - <double>cx
                wy = py - <double>cy
                wz = pz - <double>cz
                for k in range(8):
                    w = (wx if k & 1 else 1.0 - wx) * (wy if k & 2 else 1.0 - wy)
                    w = w * (wz if k & 4 else 1.0 - wz)
                    row = _row(cx + (k & 1), cy + ((k >> 1) & 1), cz + ((k >> 2) & 1),
                               r, entries[g, l], offsets[g, l])
                    for f in range(n_feat):
                        grad_table[row, f] += <real>(w * <double>dfeat[n, l * n_feat + f])


def adam_update(real[::1] param, real[::1] grad, real[::1] m, real[::1] v,
                double lr, double beta1, double beta2, double eps,
                double bias1, double bias2):
    cdef Py_ssize_t i, size = param.shape[0]
    cdef double g, mi, vi
    with nogil:
        for i in range(size):
            g = grad[i]
            mi = beta1 * m[i] + (1.0 - beta1) * g
            vi = beta2 * v[i] + (1.0 - beta2) * (g * g)
            m[i] = <real>mi
            v[i] = <real>vi
            param[i] = <real>(param[i] - lr * (m[i] / bias1) / (sqrt(v[i] / bias2) + eps))
