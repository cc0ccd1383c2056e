"""Compare the numba and numpy sampling-tree kernels on the same tree.

Both backends are defined in ``rfsoftmax._kernels`` regardless of the
``RFSOFTMAX_DISABLE_NUMBA`` flag, so they can be timed side by side in one
process.  The two receive identical uniforms; the script also checks that
they return the same leaves.

Usage::

    python benchmarks/bench_kernels.py --n 65536 --num-rff 50 --draws 10 --queries 2000
"""

import argparse
import time

import numpy as np

from rfsoftmax import _kernels
from rfsoftmax.embedding import normalize_rows
from rfsoftmax.features import build_rff
from rfsoftmax.tree import SamplerTree


def _time(func, repeats):
    func()  # warm up (and trigger JIT compilation)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        func()
        best = min(best, time.perf_counter() - start)
    return best


def run(n, d, num_frequencies, draws, queries, updates, repeats, seed):
    rng = np.random.default_rng(seed)
    classes = normalize_rows(rng.standard_normal((n, d)))
    fmap = build_rff(d, num_frequencies, nu=4.0, seed=seed)
    tree = SamplerTree(classes, fmap)
    qs = np.ascontiguousarray(fmap.transform(normalize_rows(rng.standard_normal((queries, d)))))
    uniforms = rng.random((queries, draws, tree.depth))
    leaves = rng.integers(n, size=(queries, draws))
    updates = min(updates, n)
    nodes = tree.capacity + rng.choice(n, size=updates, replace=False)
    deltas = 1e-3 * rng.standard_normal((updates, tree.feature_dim))

    def sampler(kind):
        fn = getattr(_kernels, f"sample_leaves_{kind}")
        return lambda: [fn(tree.node_sums, tree.counts, qs[i], tree.eps, uniforms[i]) for i in range(queries)]

    def prober(kind):
        fn = getattr(_kernels, f"path_probabilities_{kind}")
        return lambda: [fn(tree.node_sums, tree.counts, qs[i], tree.eps, leaves[i], tree.depth)
                        for i in range(queries)]

    def updater(kind):
        fn = getattr(_kernels, f"update_paths_{kind}")
        sums = tree.node_sums.copy()
        return lambda: fn(sums, nodes, deltas)

    for i in range(min(queries, 50)):
        a = _kernels.sample_leaves_numba(tree.node_sums, tree.counts, qs[i], tree.eps, uniforms[i])[0]
        b = _kernels.sample_leaves_numpy(tree.node_sums, tree.counts, qs[i], tree.eps, uniforms[i])[0]
        if not np.array_equal(a, b):
            print(f"warning: backends disagree on query {i} (floating point tie?)")

    print(f"n={n} d={d} D={num_frequencies} depth={tree.depth} draws/query={draws}")
    print(f"{'kernel':<22}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    cases = [
        ("sample_leaves", sampler, queries * draws, "us/draw"),
        ("path_probabilities", prober, queries * draws, "us/leaf"),
        ("update_paths", updater, updates, "us/update"),
    ]
    for name, make, count, unit in cases:
        t_numba = _time(make("numba"), repeats) / count * 1e6
        t_numpy = _time(make("numpy"), repeats) / count * 1e6
        print(f"{name:<22}{t_numba:>10.2f}  {t_numpy:>10.2f}  {t_numpy / t_numba:>8.1f}x  ({unit})")


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--n", type=int, default=65536)
    parser.add_argument("--d", type=int, default=64)
    parser.add_argument("--num-rff", type=int, default=50)
    parser.add_argument("--draws", type=int, default=10)
    parser.add_argument("--queries", type=int, default=2000)
    parser.add_argument("--updates", type=int, default=5000)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    run(args.n, args.d, args.num_rff, args.draws, args.queries, args.updates, args.repeats, args.seed)


if __name__ == "__main__":
    main()
