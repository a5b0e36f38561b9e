"""Time the compiled kernels against the numpy fallback.

Run ``python3 benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]``.
Each row reports the best wall time per backend, the speedup and whether
the two outputs are bit-identical.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from marsest import _pykernels

try:
    from marsest import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(n: int, rng: np.random.Generator):
    x = rng.standard_normal(n)
    label = rng.standard_normal(n)
    annotated = rng.random(n) < 0.3
    score = np.full(n, 0.3)
    weight = rng.standard_normal(n)
    codes = rng.integers(0, 1000, n)
    m = min(n, 4000)
    train = rng.standard_normal((m, 3))
    query = rng.standard_normal((200, 3))
    ty = rng.standard_normal(m)
    return {
        "pairwise_sum": lambda k: k.pairwise_sum(x),
        "splitmix_keys": lambda k: k.splitmix_keys(12345, n),
        "pseudo_outcomes": lambda k: k.pseudo_outcomes(x, label, annotated, score, weight),
        "cluster_totals": lambda k: k.cluster_totals(x, codes, 1000),
        "knn_predict": lambda k: k.knn_predict(train, ty, query, 5),
    }


def same(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return 1
    print(f"{'kernel':<16}{'python s':>12}{'cython s':>12}{'speedup':>10}  identical")
    ok = True
    for name, call in cases(args.n, np.random.default_rng(args.seed)).items():
        t_py = min(timeit.repeat(lambda: call(_pykernels), number=1, repeat=args.repeat))
        t_c = min(timeit.repeat(lambda: call(_ckernels), number=1, repeat=args.repeat))
        identical = same(call(_pykernels), call(_ckernels))
        ok &= identical
        print(f"{name:<16}{t_py:>12.5f}{t_c:>12.5f}{t_py / t_c:>10.1f}  {identical}")
    return 0 if ok else 2


if __name__ == "__main__":
    sys.exit(main())
