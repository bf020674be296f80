"""Time the numba kernels against their pure-numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5] [--nodes 20000]

Each kernel runs once to trigger compilation, then ``--repeat`` times per
backend; the best time is reported together with the max abs difference.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from quatgraph import kernels
from quatgraph.graph import normalize_adjacency


def best_time(fn, repeat: int) -> tuple[float, object]:
    out = fn()
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def max_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)), initial=0.0))


def cases(n_nodes: int, seed: int):
    rng = np.random.default_rng(seed)
    edges = rng.integers(0, n_nodes, size=(4 * n_nodes, 2))
    adj = normalize_adjacency(edges, n_nodes)
    dense = rng.normal(size=(n_nodes, 64))
    yield "csr_matmul", lambda nb: kernels.csr_matmul(adj.indptr, adj.indices, adj.data, dense, use_numba=nb)

    sizes = rng.integers(5, 40, size=n_nodes // 20)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    values = rng.normal(size=(offsets[-1], 128))
    yield "segment_sum", lambda nb: kernels.segment_sum(values, offsets, use_numba=nb)

    lengths = rng.integers(5, 60, size=n_nodes // 10)
    doc_offsets = np.concatenate([[0], np.cumsum(lengths)])
    tokens = rng.integers(0, 2000, size=doc_offsets[-1])
    yield "window_counts", lambda nb: kernels.window_counts(tokens, doc_offsets, 20, 2000, use_numba=nb)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--nodes", type=int, default=20000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if kernels.numba is None:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':<14} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8} {'max diff':>10}")
    for name, run in cases(args.nodes, args.seed):
        t_np, out_np = best_time(lambda: run(False), args.repeat)
        t_nb, out_nb = best_time(lambda: run(True), args.repeat)
        print(f"{name:<14} {1e3 * t_np:>11.2f} {1e3 * t_nb:>11.2f} {t_np / t_nb:>7.1f}x {max_diff(out_np, out_nb):>10.1e}")


if __name__ == "__main__":
    main()
