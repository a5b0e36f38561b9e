"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``MARSEST_PURE=1`` to
force the fallback. Both backends produce bit-identical results.
"""

from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("MARSEST_PURE"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

pairwise_sum = _impl.pairwise_sum
splitmix_keys = _impl.splitmix_keys
pseudo_outcomes = _impl.pseudo_outcomes
cluster_totals = _impl.cluster_totals
knn_predict = _impl.knn_predict

__all__ = [
    "BACKEND",
    "pairwise_sum",
    "splitmix_keys",
    "pseudo_outcomes",
    "cluster_totals",
    "knn_predict",
]
