"""Pure-numpy fallback for the compiled kernels in ``_kernels.pyx``.

Every function here mirrors its compiled twin, including the order of
floating point accumulation in ``segment_sum`` so that both backends agree
bit for bit on that kernel.
"""

import numpy as np


def segment_sum(values, indptr, indices, weights):
    values = np.ascontiguousarray(values, dtype=np.float64)
    n_groups = len(indptr) - 1
    out = np.zeros((values.shape[0], n_groups), dtype=np.float64)
    for g in range(n_groups):
        acc = np.zeros(values.shape[0], dtype=np.float64)
        for t in range(indptr[g], indptr[g + 1]):
            acc = acc + weights[t] * values[:, indices[t]]
        out[:, g] = acc
    return out


def attention_activation(scores):
    s = np.asarray(scores, dtype=np.float64)
    pos = s > 0.0
    x = np.where(pos, s, 0.0)
    den = 0.5 + x
    a = np.where(pos, x / den, 0.0)
    da = np.where(pos, 0.5 / (den * den), 0.0)
    return a, da


def bernoulli_kl(attn, q, eps):
    a = np.asarray(attn, dtype=np.float64)
    x = np.clip(a, eps, 1.0 - eps)
    inside = (a >= eps) & (a <= 1.0 - eps)
    total = float(np.sum(q * np.log(q / x) + (1.0 - q) * np.log((1.0 - q) / (1.0 - x))))
    grad = np.where(inside, -q / x + (1.0 - q) / (1.0 - x), 0.0)
    return total, grad


def rank_auc(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # tie groups share the average of their 1-based ranks
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    for i, j in zip(starts, ends):
        ranks[order[i:j]] = 0.5 * ((i + 1) + j)
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - 0.5 * n_pos * (n_pos + 1)) / (n_pos * n_neg)
