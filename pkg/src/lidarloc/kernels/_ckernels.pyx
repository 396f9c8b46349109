# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels; see ``_pykernels`` for semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, NAN

cnp.import_array()


def line_smoothness(points, int half_window):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0]
    out_arr = np.full(n, np.nan)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef int h = half_window
    cdef double sx, sy, sz, nc, cx, cy, cz
    if n < 2 * h + 1:
        return out_arr
    for i in range(h, n - h):
        cx = p[i, 0]
        cy = p[i, 1]
        cz = p[i, 2]
        sx = 0.0
        sy = 0.0
        sz = 0.0
        for j in range(i - h, i + h + 1):
            if j != i:
                sx += cx - p[j, 0]
                sy += cy - p[j, 1]
                sz += cz - p[j, 2]
        nc = sqrt(cx * cx + cy * cy + cz * cz)
        if nc == 0.0:
            out[i] = NAN
        else:
            out[i] = sqrt(sx * sx + sy * sy + sz * sz) / (2.0 * h * nc)
    return out_arr


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t x) nogil:
    cdef Py_ssize_t root = x
    cdef Py_ssize_t nxt
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


def connected_components(Py_ssize_t n, pairs):
    cdef const cnp.int64_t[:, ::1] pr = np.ascontiguousarray(
        np.asarray(pairs, dtype=np.int64).reshape(-1, 2))
    parent_arr = np.arange(n, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    cdef Py_ssize_t k, a, b
    with nogil:
        for k in range(pr.shape[0]):
            a = _find(parent, <Py_ssize_t>pr[k, 0])
            b = _find(parent, <Py_ssize_t>pr[k, 1])
            # union by smaller index keeps the root equal to the component minimum
            if a < b:
                parent[b] = a
            elif b < a:
                parent[a] = b
        for k in range(n):
            parent[k] = _find(parent, k)
    return parent_arr.astype(np.int64)


def voxel_mean(points, keys):
    pts = np.asarray(points, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0]
    if n == 0:
        return np.empty((0, 3)), np.empty(0, dtype=np.int64)
    k = np.asarray(keys, dtype=np.int64)
    order_arr = np.lexsort((k[:, 2], k[:, 1], k[:, 0]))
    cdef const cnp.int64_t[:, ::1] kk = np.ascontiguousarray(k)
    cdef const double[:, ::1] p = np.ascontiguousarray(pts)
    cdef const cnp.intp_t[::1] order = order_arr.astype(np.intp)
    inverse_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] inverse = inverse_arr
    sums_arr = np.zeros((n, 3))
    counts_arr = np.zeros(n, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef Py_ssize_t idx, prev, cur, v = -1
    with nogil:
        prev = -1
        for idx in range(n):
            cur = order[idx]
            if prev < 0 or kk[cur, 0] != kk[prev, 0] or kk[cur, 1] != kk[prev, 1] \
                    or kk[cur, 2] != kk[prev, 2]:
                v += 1
            sums[v, 0] += p[cur, 0]
            sums[v, 1] += p[cur, 1]
            sums[v, 2] += p[cur, 2]
            counts[v] += 1
            inverse[cur] = v
            prev = cur
    m = v + 1
    means = sums_arr[:m] / counts_arr[:m, None]
    return means, inverse_arr
