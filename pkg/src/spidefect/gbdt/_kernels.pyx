# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, nonecheck=False
"""Compiled kernels for exact greedy split search and forest scoring.

Mirrors ``_fallback.py`` operation for operation; both must return identical
bits, so keep summation order and expression shape in sync when editing.
"""
import numpy as np

from libc.stdint cimport int16_t, int32_t, int64_t, uint8_t


def node_sums(const int16_t[::1] node_of, const double[::1] g, const double[::1] h,
              Py_ssize_t n_nodes):
    """Per-node gradient and hessian totals, accumulated in row order."""
    G = np.zeros(n_nodes, dtype=np.float64)
    H = np.zeros(n_nodes, dtype=np.float64)
    cdef double[::1] Gv = G
    cdef double[::1] Hv = H
    cdef Py_ssize_t i, n = node_of.shape[0]
    cdef int16_t nd
    with nogil:
        for i in range(n):
            nd = node_of[i]
            if nd >= 0:
                Gv[nd] += g[i]
                Hv[nd] += h[i]
    return G, H


def gather_sorted(const int32_t[:, ::1] order, const double[::1] g, const double[::1] h):
    """``g`` and ``h`` laid out in each feature's sorted row order."""
    cdef Py_ssize_t F = order.shape[0], n = order.shape[1], f, k
    sg = np.empty((F, n), dtype=np.float64)
    sh = np.empty((F, n), dtype=np.float64)
    cdef double[:, ::1] sgv = sg
    cdef double[:, ::1] shv = sh
    cdef int32_t i
    with nogil:
        for f in range(F):
            for k in range(n):
                i = order[f, k]
                sgv[f, k] = g[i]
                shv[f, k] = h[i]
    return sg, sh


def route(int16_t[::1] node_of, const double[:, ::1] X, const int64_t[::1] split_feature,
          const double[::1] split_threshold, const int16_t[::1] to_left,
          const int16_t[::1] to_right):
    """Move every active row to its child slot in place (-1 if its node became a leaf)."""
    cdef Py_ssize_t i, n = node_of.shape[0]
    cdef int16_t nd
    cdef int64_t f
    with nogil:
        for i in range(n):
            nd = node_of[i]
            if nd < 0:
                continue
            f = split_feature[nd]
            if f < 0:
                node_of[i] = -1
            elif X[i, f] < split_threshold[nd]:
                node_of[i] = to_left[nd]
            else:
                node_of[i] = to_right[nd]


cdef inline double _midpoint(double a, double b) noexcept nogil:
    cdef double m = 0.5 * (a + b)
    if m <= a:
        m = b
    return m


def find_splits(const int32_t[:, ::1] order, const double[:, ::1] sorted_vals,
                const double[:, ::1] sorted_g, const double[:, ::1] sorted_h,
                const int16_t[::1] node_of, const double[::1] node_g, const double[::1] node_h,
                const uint8_t[::1] feature_mask, double lam, double gamma,
                double min_child_hessian):
    """Best split for every active node of one tree level.

    ``order[f]`` lists all training rows by ascending value of feature ``f``
    (stable, so ties keep row order); ``sorted_vals``, ``sorted_g`` and
    ``sorted_h`` hold values, gradients and hessians in that order. Rows with
    ``node_of < 0`` are ignored. Returns ``(feature, threshold, gain)`` per
    node; feature is -1 when no split has positive gain.
    """
    cdef Py_ssize_t F = order.shape[0]
    cdef Py_ssize_t n = order.shape[1]
    cdef Py_ssize_t m = node_g.shape[0]
    best_feature = np.full(m, -1, dtype=np.int64)
    best_threshold = np.zeros(m, dtype=np.float64)
    best_gain = np.zeros(m, dtype=np.float64)
    cdef int64_t[::1] bf = best_feature
    cdef double[::1] bt = best_threshold
    cdef double[::1] bg = best_gain
    cdef double[::1] gl = np.zeros(m, dtype=np.float64)
    cdef double[::1] hl = np.zeros(m, dtype=np.float64)
    cdef double[::1] last = np.zeros(m, dtype=np.float64)
    cdef double[::1] parent = np.zeros(m, dtype=np.float64)
    cdef uint8_t[::1] seen = np.zeros(m, dtype=np.uint8)
    cdef Py_ssize_t f, k, s
    cdef int16_t nd
    cdef double v, a, b, gr, hr, gain
    with nogil:
        for s in range(m):
            parent[s] = node_g[s] * node_g[s] / (node_h[s] + lam)
        for f in range(F):
            if not feature_mask[f]:
                continue
            for s in range(m):
                gl[s] = 0.0
                hl[s] = 0.0
                seen[s] = 0
            for k in range(n):
                nd = node_of[order[f, k]]
                if nd < 0:
                    continue
                v = sorted_vals[f, k]
                if seen[nd] and v > last[nd]:
                    a = gl[nd]
                    b = hl[nd]
                    gr = node_g[nd] - a
                    hr = node_h[nd] - b
                    if b >= min_child_hessian and hr >= min_child_hessian:
                        gain = 0.5 * (a * a / (b + lam) + gr * gr / (hr + lam) - parent[nd]) - gamma
                        if gain > bg[nd]:
                            bg[nd] = gain
                            bf[nd] = f
                            bt[nd] = _midpoint(last[nd], v)
                gl[nd] += sorted_g[f, k]
                hl[nd] += sorted_h[f, k]
                last[nd] = v
                seen[nd] = 1
    return best_feature, best_threshold, best_gain


def predict_sum(const double[:, ::1] X, const int32_t[::1] feature, const double[::1] threshold,
                const int32_t[::1] left, const int32_t[::1] right, const double[::1] value,
                const int64_t[::1] roots):
    """Sum of leaf values over the trees rooted at ``roots`` (added in tree order)."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t T = roots.shape[0]
    acc = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = acc
    cdef Py_ssize_t t, i
    cdef int64_t nd
    with nogil:
        for t in range(T):
            for i in range(n):
                nd = roots[t]
                while feature[nd] >= 0:
                    if X[i, feature[nd]] < threshold[nd]:
                        nd = left[nd]
                    else:
                        nd = right[nd]
                out[i] += value[nd]
    return acc
