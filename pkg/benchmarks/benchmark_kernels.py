"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs every dual-backend kernel on a representative workload with both
backends, checks that the results are identical, and prints a timing
table. Numba compilation happens once up front so JIT cost is excluded.

Usage:
    python3 benchmarks/benchmark_kernels.py [--repeats N] [--alphabet K]
                                            [--max-len L] [--pairs N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from uttertune import kernels


def _best_of(repeats, fn):
    best = float("inf")
    for _ in range(repeats):
        started = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - started)
    return best, result


def _bench(name, repeats, fn):
    rows = []
    results = {}
    for backend in ("numpy", "numba") if kernels.NUMBA_AVAILABLE else ("numpy",):
        kernels.set_backend(backend)
        seconds, result = _best_of(repeats, fn)
        rows.append((backend, seconds))
        results[backend] = result
    if len(results) == 2:
        a, b = results["numpy"], results["numba"]
        agree = np.array_equal(a, b) if isinstance(a, np.ndarray) else a == b
        if not agree:
            raise AssertionError(f"{name}: backends disagree")
    base = dict(rows)["numpy"]
    for backend, seconds in rows:
        speedup = base / seconds if seconds else float("inf")
        print(f"  {name:<24} {backend:<6} {seconds * 1e3:>10.2f} ms "
              f"(x{speedup:.1f} vs numpy)")
    return rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--alphabet", type=int, default=4,
                        help="alphabet size for the exhaustive universe")
    parser.add_argument("--max-len", type=int, default=6,
                        help="maximum string length in the universe")
    parser.add_argument("--pairs", type=int, default=2000,
                        help="random id-sequence pairs for edit_distance")
    args = parser.parse_args()

    if kernels.NUMBA_AVAILABLE:
        kernels.set_backend("numba")
        kernels.warmup()
    else:
        print("numba not importable; timing the numpy backend only")

    rng = np.random.default_rng(0)
    pairs = [
        (
            rng.integers(0, 30, size=rng.integers(5, 40)),
            rng.integers(0, 30, size=rng.integers(5, 40)),
        )
        for _ in range(args.pairs)
    ]
    padded, lengths = kernels.enumerate_strings(args.alphabet, args.max_len)
    indptr, indices, n_nodes = kernels.edit_move_graph(
        args.alphabet, args.max_len
    )
    print(
        f"universe: alphabet {args.alphabet}, length <= {args.max_len} "
        f"-> {len(lengths)} strings, {indices.size} graph edges"
    )

    def run_pairs():
        return sum(kernels.edit_distance(a, b) for a, b in pairs)

    def run_matrix():
        return kernels.edit_distance_matrix(padded, lengths)

    def run_bfs():
        return kernels.bfs_distance_matrix(indptr, indices, n_nodes)

    print(f"timings (best of {args.repeats}):")
    _bench(f"edit_distance x{args.pairs}", args.repeats, run_pairs)
    _bench("edit_distance_matrix", args.repeats, run_matrix)
    _bench("bfs_distance_matrix", args.repeats, run_bfs)
    kernels.set_backend("auto")


if __name__ == "__main__":
    main()
