# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: permutation search for the Bellman update and radio
contact detection. Mirrors _kernels_py with identical floating-point
evaluation order (build without FP contraction; see setup.py)."""

from libc.math cimport INFINITY

import numpy as np


cdef double _decision_value_mv(const double[::1] c, const double[::1] q,
                               const double[::1] w, const long long[::1] order) noexcept nogil:
    cdef double prod_c = 1.0
    cdef double sum_q = 0.0
    cdef double value = 0.0
    cdef double ck, qk, p
    cdef Py_ssize_t m, k
    for m in range(order.shape[0]):
        k = <Py_ssize_t> order[m]
        ck = c[k]
        qk = q[k]
        p = prod_c * (ck * (1.0 - sum_q) + qk - ck * qk)
        if p < 0.0:
            p = 0.0
        elif p > 1.0:
            p = 1.0
        value += p * w[k]
        prod_c *= 1.0 - ck
        sum_q += qk
    return value


cdef bint _next_perm(long long[::1] a) noexcept nogil:
    """Advance to the next lexicographic permutation; False past the last."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i = n - 2
    cdef Py_ssize_t j, lo, hi
    cdef long long tmp
    while i >= 0 and a[i] >= a[i + 1]:
        i -= 1
    if i < 0:
        return False
    j = n - 1
    while a[j] <= a[i]:
        j -= 1
    tmp = a[i]; a[i] = a[j]; a[j] = tmp
    lo = i + 1
    hi = n - 1
    while lo < hi:
        tmp = a[lo]; a[lo] = a[hi]; a[hi] = tmp
        lo += 1
        hi -= 1
    return True


def forwarding_probs(c, q, order):
    """Forwarding probability for each scan position of a priority order."""
    cdef double[::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef double[::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef long long[::1] ov = np.ascontiguousarray(order, dtype=np.int64)
    out = np.empty(ov.shape[0], dtype=np.float64)
    cdef double[::1] rv = out
    cdef double prod_c = 1.0
    cdef double sum_q = 0.0
    cdef double ck, qk, p
    cdef Py_ssize_t m, k
    for m in range(ov.shape[0]):
        k = <Py_ssize_t> ov[m]
        ck = cv[k]
        qk = qv[k]
        p = prod_c * (ck * (1.0 - sum_q) + qk - ck * qk)
        if p < 0.0:
            p = 0.0
        elif p > 1.0:
            p = 1.0
        rv[m] = p
        prod_c *= 1.0 - ck
        sum_q += qk
    return out


def decision_value(c, q, w, order):
    """Expected cost sum(P_m * w[order[m]]) of scanning candidates in `order`."""
    cdef double[::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef double[::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef long long[::1] ov = np.ascontiguousarray(order, dtype=np.int64)
    return _decision_value_mv(cv, qv, wv, ov)


def best_order_brute(c, q, w):
    """Minimum-cost priority order by exhaustive lexicographic enumeration.

    Ties keep the first (lexicographically smallest) permutation, which in
    canonical candidate order means lower (vtype, destination) wins.
    """
    cdef double[::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef double[::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n = cv.shape[0]
    if n == 0:
        return (), float("inf")
    perm = np.arange(n, dtype=np.int64)
    best = np.arange(n, dtype=np.int64)
    cdef long long[::1] pv = perm
    cdef long long[::1] bv = best
    cdef double best_value = INFINITY
    cdef double value
    cdef bint more = True
    cdef Py_ssize_t i
    with nogil:
        while more:
            value = _decision_value_mv(cv, qv, wv, pv)
            if value < best_value:
                best_value = value
                for i in range(n):
                    bv[i] = pv[i]
            more = _next_perm(pv)
    return tuple(best.tolist()), best_value


def contact_pairs(x, y, radio_range):
    """Index pairs (i, j), i < j, within the closed radio ball, in row order."""
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0]
    cdef double r2 = radio_range * radio_range
    cdef double dx, dy
    cdef Py_ssize_t i, j
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            dx = xv[i] - xv[j]
            dy = yv[i] - yv[j]
            if dx * dx + dy * dy <= r2:
                pairs.append((i, j))
    return pairs
