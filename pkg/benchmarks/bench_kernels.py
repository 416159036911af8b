"""Time each hot kernel on its numba and numpy paths and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

The first numba call compiles (or loads from cache) and is excluded from the
timings via a warm-up call.
"""

import argparse
import json
import sys
import time

import numpy as np

from qfvs import _kernels as K
from qfvs.segmentation import cosine_gram, scatter_matrix


def _cases(rng):
    cols = rng.normal(size=(3, 64, 40, 5))
    pool_x = rng.normal(size=(3, 64, 200))
    pooled, pos = K.maxpool_forward_numpy(pool_x, 2, 2)
    gram = cosine_gram(rng.normal(size=(400, 64)))
    scatter = scatter_matrix(gram)
    cost = rng.random((120, 120))
    return {
        "col2im": (K.col2im_numpy, K.col2im_numba, (cols, 5, 200)),
        "maxpool_forward": (K.maxpool_forward_numpy, K.maxpool_forward_numba, (pool_x, 2, 2)),
        "maxpool_backward": (K.maxpool_backward_numpy, K.maxpool_backward_numba, (np.ones_like(pooled), pos, 200)),
        "scatter": (K.scatter_numpy, K.scatter_numba, (gram,)),
        "segment_dp": (K.segment_dp_numpy, K.segment_dp_numba, (scatter, 19)),
        "hungarian": (K.hungarian_numpy, K.hungarian_numba, (cost,)),
    }


def _best_of(fn, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, rtol=1e-12, atol=1e-12) for x, y in zip(a, b))


def run(repeat=5, seed=0):
    if K.col2im_numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(seed)
    rows = []
    for name, (np_fn, nb_fn, args) in _cases(rng).items():
        ref, fast = np_fn(*args), nb_fn(*args)  # warm-up doubles as the agreement check
        rows.append({
            "kernel": name,
            "numpy_s": _best_of(np_fn, args, repeat),
            "numba_s": _best_of(nb_fn, args, repeat),
            "agree": bool(_same(ref, fast)),
        })
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write the rows as JSON")
    args = p.parse_args(argv)
    rows = run(args.repeat, args.seed)
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  agree")
    for r in rows:
        print(
            f"{r['kernel']:<18} {1e3 * r['numpy_s']:10.3f} {1e3 * r['numba_s']:10.3f} "
            f"{r['numpy_s'] / r['numba_s']:8.1f}  {r['agree']}"
        )
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r["agree"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
