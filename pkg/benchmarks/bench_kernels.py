"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the default synthetic cohort and a full training batch.
"""

import argparse
import timeit

import numpy as np

from neuropathx import _kernels_py

try:
    from neuropathx import _kernels
except ImportError:
    _kernels = None


def _cases(rng):
    n_subjects, n_snps, n_genes = 200, 2000, 200
    dosages = rng.binomial(2, 0.3, size=(n_subjects, n_snps)).astype(np.float64)
    indptr = np.linspace(0, n_snps, n_genes + 1).astype(np.int64)
    indices = np.arange(n_snps, dtype=np.int64)
    weights = rng.normal(size=n_snps)
    scores = rng.normal(size=(128, 40, 30))
    attn = rng.uniform(0.0, 0.99, size=(2, 40, 30))
    auc_scores = rng.uniform(size=2000)
    auc_labels = (rng.uniform(size=2000) < 0.5).astype(np.int64)
    return {
        "segment_sum": lambda k: k.segment_sum(dosages, indptr, indices, weights),
        "attention_activation": lambda k: k.attention_activation(scores),
        "bernoulli_kl": lambda k: k.bernoulli_kl(attn, 0.01, 1e-6),
        "rank_auc": lambda k: k.rank_auc(auc_scores, auc_labels),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':22s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, call in cases.items():
        t_py = min(timeit.repeat(lambda: call(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if _kernels is None:
            print(f"{name:22s} {t_py:10.3f} {'n/a':>10s} {'n/a':>8s}")
            continue
        t_cy = min(timeit.repeat(lambda: call(_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:22s} {t_py:10.3f} {t_cy:10.3f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
