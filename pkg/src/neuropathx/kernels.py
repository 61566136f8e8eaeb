"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``NPX_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("NPX_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

segment_sum = _impl.segment_sum
attention_activation = _impl.attention_activation
bernoulli_kl = _impl.bernoulli_kl
rank_auc = _impl.rank_auc

__all__ = [
    "BACKEND",
    "segment_sum",
    "attention_activation",
    "bernoulli_kl",
    "rank_auc",
]
