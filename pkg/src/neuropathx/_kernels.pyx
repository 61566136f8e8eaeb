# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Semantics must match ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log

cnp.import_array()


def segment_sum(const double[:, ::1] values,
                const long long[::1] indptr,
                const long long[::1] indices,
                const double[::1] weights):
    """out[r, g] = sum of weights[t] * values[r, indices[t]] over group g's slice.

    Accumulation runs left to right within each group, starting from 0.0.
    """
    cdef Py_ssize_t n_rows = values.shape[0]
    cdef Py_ssize_t n_groups = indptr.shape[0] - 1
    cdef Py_ssize_t r, g, t
    cdef double acc
    out = np.zeros((n_rows, n_groups), dtype=np.float64)
    cdef double[:, ::1] o = out
    for r in range(n_rows):
        for g in range(n_groups):
            acc = 0.0
            for t in range(indptr[g], indptr[g + 1]):
                acc = acc + weights[t] * values[r, indices[t]]
            o[r, g] = acc
    return out


def attention_activation(cnp.ndarray scores):
    """Fused x -> relu(x) / (0.5 + relu(x)) with its elementwise derivative."""
    cdef cnp.ndarray[double, ndim=1] s = np.ascontiguousarray(scores, dtype=np.float64).ravel()
    cdef Py_ssize_t n = s.shape[0], i
    cdef cnp.ndarray[double, ndim=1] a = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] da = np.empty(n, dtype=np.float64)
    cdef double x, den
    for i in range(n):
        x = s[i]
        if x > 0.0:
            den = 0.5 + x
            a[i] = x / den
            da[i] = 0.5 / (den * den)
        else:
            a[i] = 0.0
            da[i] = 0.0
    shape = np.shape(scores)
    return a.reshape(shape), da.reshape(shape)


def bernoulli_kl(cnp.ndarray attn, double q, double eps):
    """Sum of KL(Ber(q) || Ber(a)) over entries clamped to [eps, 1 - eps].

    Returns the total and the gradient w.r.t. the unclamped entries
    (zero where the clamp is active).
    """
    cdef cnp.ndarray[double, ndim=1] a = np.ascontiguousarray(attn, dtype=np.float64).ravel()
    cdef Py_ssize_t n = a.shape[0], i
    cdef cnp.ndarray[double, ndim=1] g = np.empty(n, dtype=np.float64)
    cdef double x, total = 0.0, lo = eps, hi = 1.0 - eps
    cdef double omq = 1.0 - q
    for i in range(n):
        x = a[i]
        if x < lo:
            x = lo
            g[i] = 0.0
        elif x > hi:
            x = hi
            g[i] = 0.0
        else:
            g[i] = -q / x + omq / (1.0 - x)
        total = total + (q * log(q / x) + omq * log(omq / (1.0 - x)))
    return total, g.reshape(np.shape(attn))


def rank_auc(cnp.ndarray scores, cnp.ndarray labels):
    """Mann-Whitney AUC with ties counted as one half. NaN if a class is empty."""
    cdef cnp.ndarray[double, ndim=1] s = np.ascontiguousarray(scores, dtype=np.float64).ravel()
    cdef cnp.ndarray[long long, ndim=1] y = np.ascontiguousarray(labels, dtype=np.int64).ravel()
    cdef cnp.ndarray[long long, ndim=1] order = np.argsort(s, kind="mergesort").astype(np.int64)
    cdef Py_ssize_t n = s.shape[0], i, j, k
    cdef double rank_sum = 0.0, avg
    cdef long long n_pos = 0, n_neg
    for i in range(n):
        n_pos += y[i]
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    i = 0
    while i < n:
        j = i
        while j + 1 < n and s[order[j + 1]] == s[order[i]]:
            j += 1
        # 1-based ranks i+1..j+1 share their average
        avg = 0.5 * ((i + 1) + (j + 1))
        for k in range(i, j + 1):
            if y[order[k]] == 1:
                rank_sum += avg
        i = j + 1
    return (rank_sum - 0.5 * n_pos * (n_pos + 1)) / (<double>n_pos * <double>n_neg)
