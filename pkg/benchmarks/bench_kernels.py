"""Benchmark the compiled kernels against the pure NumPy fallback.

Both backends consume identical pre-drawn random numbers, so besides
timing, this script asserts that their outputs match exactly.

Usage: python3 benchmarks/bench_kernels.py [--walks N] [--steps N]
"""

import argparse
import time

import numpy as np

from edgelbs import dataset as ds
from edgelbs import pretrain
from edgelbs.kernels import _py

try:
    from edgelbs.kernels import _fast
except ImportError:
    _fast = None


def _time(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_walk_steps(n_walks, n_steps):
    log, _, truth = ds.generate_synthetic(
        ds.SynthSpec(n_users=12, n_pois=24, n_clusters=6, seq_len=30), seed=0
    )
    graph = pretrain.build_graph(log, truth.poi_coords)
    cdfs, offsets, neighbors = pretrain._walk_tables(graph, rho=0.5)
    rng = np.random.default_rng(0)
    starts = rng.integers(0, len(graph), size=n_walks).astype(np.int64)
    uniforms = rng.random((n_walks, n_steps))
    restarts = rng.integers(0, len(graph), size=(n_walks, n_steps)).astype(np.int64)

    args = (cdfs, offsets, neighbors, starts, uniforms, restarts)
    t_py = _time(lambda: _py.walk_steps(*args))
    row = f"walk_steps     {n_walks:>7} x {n_steps:<4} python {t_py * 1e3:9.2f} ms"
    if _fast is not None:
        t_fast = _time(lambda: _fast.walk_steps(*args))
        assert np.array_equal(_py.walk_steps(*args), _fast.walk_steps(*args))
        row += f"   cython {t_fast * 1e3:9.2f} ms   speedup {t_py / t_fast:6.1f}x"
    print(row)


def bench_sgns_epoch(n_pairs, dim=32, vocab=512, negatives=5):
    rng = np.random.default_rng(1)
    centers = rng.integers(0, vocab, size=n_pairs).astype(np.int64)
    contexts = rng.integers(0, vocab, size=n_pairs).astype(np.int64)
    negs = rng.integers(0, vocab, size=(n_pairs, negatives)).astype(np.int64)

    def run(impl):
        emb_in = np.asarray(np.random.default_rng(2).normal(0, 0.1, (vocab, dim)))
        emb_out = np.zeros((vocab, dim))
        loss = impl.sgns_epoch(emb_in, emb_out, centers, contexts, negs, lr=0.025)
        return emb_in, emb_out, loss

    t_py = _time(lambda: run(_py))
    row = f"sgns_epoch     {n_pairs:>7} pairs    python {t_py * 1e3:9.2f} ms"
    if _fast is not None:
        t_fast = _time(lambda: run(_fast))
        a, b = run(_py), run(_fast)
        assert np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])
        assert abs(a[2] - b[2]) < 1e-9
        row += f"   cython {t_fast * 1e3:9.2f} ms   speedup {t_py / t_fast:6.1f}x"
    print(row)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--walks", type=int, default=20_000)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--pairs", type=int, default=100_000)
    args = ap.parse_args()

    if _fast is None:
        print("compiled backend unavailable; timing the python fallback only")
    bench_walk_steps(args.walks, args.steps)
    bench_sgns_epoch(args.pairs)


if __name__ == "__main__":
    main()
