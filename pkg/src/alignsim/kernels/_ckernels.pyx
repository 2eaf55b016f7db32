# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Semantics mirror ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, tanh

cnp.import_array()


cdef inline bint _outranks(double s, cnp.int64_t r, double s2, cnp.int64_t r2) noexcept nogil:
    return s > s2 or (s == s2 and r < r2)


def cosine_topk(const double[:, ::1] docs, const double[::1] query,
                const cnp.int64_t[::1] rank, Py_ssize_t k):
    cdef Py_ssize_t n = docs.shape[0], d = docs.shape[1]
    cdef Py_ssize_t i, j, pos, count = 0
    cdef double s
    if k > n:
        k = n
    best_idx = np.empty(k, dtype=np.int64)
    best_sim = np.empty(k, dtype=np.float64)
    cdef cnp.int64_t[::1] bi = best_idx
    cdef double[::1] bs = best_sim
    if k == 0:
        return best_idx, best_sim
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s = s + docs[i, j] * query[j]
            if count == k and not _outranks(s, rank[i], bs[k - 1], rank[bi[k - 1]]):
                continue
            pos = count if count < k else k - 1
            while pos > 0 and _outranks(s, rank[i], bs[pos - 1], rank[bi[pos - 1]]):
                if pos < k:
                    bs[pos] = bs[pos - 1]
                    bi[pos] = bi[pos - 1]
                pos -= 1
            bs[pos] = s
            bi[pos] = i
            if count < k:
                count += 1
    return best_idx, best_sim


def js_divergence(const double[::1] p, const double[::1] q):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double m, left = 0.0, right = 0.0
    for i in range(n):
        m = 0.5 * (p[i] + q[i])
        if p[i] > 0.0:
            left += p[i] * log(p[i] / m)
        if q[i] > 0.0:
            right += q[i] * log(q[i] / m)
    s = 0.5 * left + 0.5 * right
    return s if s > 0.0 else 0.0


def mlp_logit(const double[::1] h, const double[:, ::1] w1, const double[::1] b1,
              const double[::1] w2, double b2):
    cdef Py_ssize_t i, j, hidden = w1.shape[0], d = w1.shape[1]
    cdef double a, z = 0.0
    for i in range(hidden):
        a = b1[i]
        for j in range(d):
            a = a + w1[i, j] * h[j]
        z = z + w2[i] * tanh(a)
    return z + b2
