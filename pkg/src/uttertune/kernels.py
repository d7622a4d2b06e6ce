"""Hot numeric kernels with two interchangeable backends.

Every kernel here exists twice: a numba-compiled version and a pure-numpy
version. The active backend is chosen by the UTTERTUNE_BACKEND environment
variable ("numba", "numpy", or "auto"; auto prefers numba when it imports).
Both backends compute bit-identical integer results; the benchmark script
under benchmarks/ times them against each other.

Kernels:
  * edit_distance          unit-cost Levenshtein between two id sequences
  * edit_distance_matrix   all-pairs Levenshtein over a padded string table
  * bfs_distance_matrix    all-pairs shortest paths on an explicit
                           edit-move graph (the DP-free oracle used to
                           cross-check the DP route; keep the two
                           implementations independent)

Plus deterministic constructors for the exhaustive small-string universe
and its edit-move graph (nodes = strings, edges = single edit operations).
An optimal edit script can always be reordered as deletions, then
substitutions, then insertions, so intermediate strings never exceed
max(len(a), len(b)); BFS restricted to strings of length <= max_len is
therefore exact for pairs inside the universe.
"""

from __future__ import annotations

import itertools
import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return deco


_UNVISITED = np.uint8(255)


def _resolve_backend(name: str) -> str:
    name = (name or "auto").strip().lower()
    if name not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"UTTERTUNE_BACKEND must be auto, numba, or numpy, got {name!r}"
        )
    if name == "numpy":
        return "numpy"
    if name == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError("UTTERTUNE_BACKEND=numba but numba is not importable")
        return "numba"
    return "numba" if NUMBA_AVAILABLE else "numpy"


_BACKEND = _resolve_backend(os.environ.get("UTTERTUNE_BACKEND", "auto"))


def active_backend() -> str:
    """Name of the backend in use: 'numba' or 'numpy'."""
    return _BACKEND


def set_backend(name: str) -> str:
    """Switch backends at runtime (mainly for tests and benchmarks)."""
    global _BACKEND
    _BACKEND = _resolve_backend(name)
    return _BACKEND


# -- single-pair edit distance -------------------------------------------


@njit(cache=True)
def _edit_distance_nb(a, b):  # pragma: no cover - compiled
    m = a.shape[0]
    n = b.shape[0]
    prev = np.empty(n + 1, dtype=np.int64)
    cur = np.empty(n + 1, dtype=np.int64)
    for j in range(n + 1):
        prev[j] = j
    for i in range(m):
        cur[0] = i + 1
        ai = a[i]
        for j in range(n):
            cost = 0 if ai == b[j] else 1
            best = prev[j] + cost
            if prev[j + 1] + 1 < best:
                best = prev[j + 1] + 1
            if cur[j] + 1 < best:
                best = cur[j] + 1
            cur[j + 1] = best
        prev, cur = cur, prev
    return prev[n]


def _edit_distance_np(a: np.ndarray, b: np.ndarray) -> int:
    m, n = a.shape[0], b.shape[0]
    if n == 0:
        return m
    prev = np.arange(n + 1, dtype=np.int64)
    idx = np.arange(n + 1, dtype=np.int64)
    for i in range(m):
        # Candidates ignoring the within-row (insertion) dependency.
        cand = np.empty(n + 1, dtype=np.int64)
        cand[0] = i + 1
        cand[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (a[i] != b))
        # Fold insertions back in: cur[j] = min_{k<=j} cand[k] + (j-k).
        prev = np.minimum.accumulate(cand - idx) + idx
    return int(prev[n])


def edit_distance(a, b) -> int:
    """Unit-cost Levenshtein distance between two integer sequences."""
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if _BACKEND == "numba":
        return int(_edit_distance_nb(a, b))
    return _edit_distance_np(a, b)


# -- all-pairs edit distance over a padded table ---------------------------


@njit(cache=True)
def _edit_distance_matrix_nb(padded, lengths):  # pragma: no cover - compiled
    n_str = padded.shape[0]
    out = np.empty((n_str, n_str), dtype=np.uint8)
    max_len = padded.shape[1]
    prev = np.empty(max_len + 1, dtype=np.int64)
    cur = np.empty(max_len + 1, dtype=np.int64)
    for ia in range(n_str):
        la = lengths[ia]
        for ib in range(n_str):
            lb = lengths[ib]
            for j in range(lb + 1):
                prev[j] = j
            for i in range(la):
                cur[0] = i + 1
                ai = padded[ia, i]
                for j in range(lb):
                    cost = 0 if ai == padded[ib, j] else 1
                    best = prev[j] + cost
                    if prev[j + 1] + 1 < best:
                        best = prev[j + 1] + 1
                    if cur[j] + 1 < best:
                        best = cur[j] + 1
                    cur[j + 1] = best
                for j in range(lb + 1):
                    prev[j] = cur[j]
            out[ia, ib] = prev[lb]
    return out


def _edit_distance_matrix_np(padded: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    n_str = padded.shape[0]
    out = np.empty((n_str, n_str), dtype=np.uint8)
    max_len = int(lengths.max()) if n_str else 0
    by_len = [np.nonzero(lengths == L)[0] for L in range(max_len + 1)]
    for la in range(max_len + 1):
        rows = by_len[la]
        if rows.size == 0:
            continue
        A = padded[rows, :la]
        for lb in range(max_len + 1):
            cols = by_len[lb]
            if cols.size == 0:
                continue
            B = padded[cols, :lb]
            # DP layers: one (len(rows), len(cols)) matrix per table cell,
            # iterated over the <= 7x7 cells only.
            prev_row = [
                np.full((rows.size, cols.size), j, dtype=np.int64)
                for j in range(lb + 1)
            ]
            for i in range(la):
                cur_row = [np.full((rows.size, cols.size), i + 1, dtype=np.int64)]
                ai = A[:, i][:, None]
                for j in range(lb):
                    cost = (ai != B[:, j][None, :]).astype(np.int64)
                    best = np.minimum(prev_row[j] + cost, prev_row[j + 1] + 1)
                    np.minimum(best, cur_row[j] + 1, out=best)
                    cur_row.append(best)
                prev_row = cur_row
            out[np.ix_(rows, cols)] = prev_row[lb].astype(np.uint8)
    return out


def edit_distance_matrix(padded, lengths) -> np.ndarray:
    """Levenshtein distance for every ordered pair of table rows.

    padded is (n, max_len) int8/int64 with rows padded past their length;
    lengths is (n,). Returns a (n, n) uint8 matrix (distances <= max_len).
    """
    padded = np.ascontiguousarray(padded, dtype=np.int64)
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)
    if _BACKEND == "numba":
        return _edit_distance_matrix_nb(padded, lengths)
    return _edit_distance_matrix_np(padded, lengths)


# -- BFS oracle over the edit-move graph -----------------------------------


@njit(cache=True)
def _bfs_matrix_nb(indptr, indices, n_nodes):  # pragma: no cover - compiled
    out = np.full((n_nodes, n_nodes), 255, dtype=np.uint8)
    queue = np.empty(n_nodes, dtype=np.int64)
    for src in range(n_nodes):
        dist = out[src]
        dist[src] = 0
        queue[0] = src
        head = 0
        tail = 1
        while head < tail:
            u = queue[head]
            head += 1
            du = dist[u]
            for e in range(indptr[u], indptr[u + 1]):
                v = indices[e]
                if dist[v] == 255:
                    dist[v] = du + 1
                    queue[tail] = v
                    tail += 1
    return out


def _bfs_matrix_np(indptr: np.ndarray, indices: np.ndarray, n_nodes: int) -> np.ndarray:
    # Pad adjacency to a rectangle so each BFS level is one fancy-index
    # gather; padding points each node at itself (harmless self loop).
    degrees = np.diff(indptr)
    max_deg = int(degrees.max()) if n_nodes else 0
    adj = np.repeat(np.arange(n_nodes, dtype=np.int64)[:, None], max_deg, axis=1)
    for u in range(n_nodes):
        d = degrees[u]
        adj[u, :d] = indices[indptr[u] : indptr[u] + d]
    out = np.full((n_nodes, n_nodes), _UNVISITED, dtype=np.uint8)
    for src in range(n_nodes):
        dist = out[src]
        dist[src] = 0
        frontier = np.array([src], dtype=np.int64)
        level = np.uint8(0)
        while frontier.size:
            level = np.uint8(level + 1)
            reached = adj[frontier].ravel()
            new_mask = dist[reached] == _UNVISITED
            new_nodes = np.unique(reached[new_mask])
            if new_nodes.size == 0:
                break
            dist[new_nodes] = level
            frontier = new_nodes
    return out


def bfs_distance_matrix(indptr, indices, n_nodes: int) -> np.ndarray:
    """All-pairs shortest-path lengths by BFS from every node.

    255 marks unreachable. Independent of the DP kernels by construction.
    """
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    if _BACKEND == "numba":
        return _bfs_matrix_nb(indptr, indices, n_nodes)
    return _bfs_matrix_np(indptr, indices, n_nodes)


# -- exhaustive string universe --------------------------------------------


def enumerate_strings(alphabet_size: int, max_len: int):
    """All strings of length 0..max_len, ordered by length then lexicographic.

    Returns (padded, lengths): padded is (n, max_len_eff) int64 padded with
    -1, lengths is (n,) int64. Row order defines the node ids used by
    edit_move_graph.
    """
    width = max(max_len, 1)
    rows = [(-np.ones(width, dtype=np.int64), 0)]
    for L in range(1, max_len + 1):
        for combo in itertools.product(range(alphabet_size), repeat=L):
            row = -np.ones(width, dtype=np.int64)
            row[:L] = combo
            rows.append((row, L))
    padded = np.stack([r for r, _ in rows])
    lengths = np.array([L for _, L in rows], dtype=np.int64)
    return padded, lengths


def edit_move_graph(alphabet_size: int, max_len: int):
    """Edit-move graph over enumerate_strings(alphabet_size, max_len).

    Undirected by construction (every edit has an inverse edit inside the
    universe). Returns CSR (indptr, indices) plus the node count.
    """
    ids: dict[tuple, int] = {}
    strings: list[tuple] = []
    strings.append(())
    ids[()] = 0
    for L in range(1, max_len + 1):
        for combo in itertools.product(range(alphabet_size), repeat=L):
            ids[combo] = len(strings)
            strings.append(combo)
    n = len(strings)
    neighbor_lists: list[list[int]] = [[] for _ in range(n)]
    for u, s in enumerate(strings):
        L = len(s)
        nbrs = set()
        for p in range(L):
            for c in range(alphabet_size):
                if c != s[p]:
                    nbrs.add(ids[s[:p] + (c,) + s[p + 1 :]])
            nbrs.add(ids[s[:p] + s[p + 1 :]])
        if L < max_len:
            for p in range(L + 1):
                for c in range(alphabet_size):
                    nbrs.add(ids[s[:p] + (c,) + s[p:]])
        neighbor_lists[u] = sorted(nbrs)
    indptr = np.zeros(n + 1, dtype=np.int64)
    for u in range(n):
        indptr[u + 1] = indptr[u] + len(neighbor_lists[u])
    indices = np.empty(indptr[-1], dtype=np.int64)
    for u in range(n):
        indices[indptr[u] : indptr[u + 1]] = neighbor_lists[u]
    return indptr, indices, n


def warmup():
    """Force numba compilation so later timing excludes JIT cost."""
    if _BACKEND != "numba":
        return
    a = np.array([0, 1], dtype=np.int64)
    b = np.array([1], dtype=np.int64)
    _edit_distance_nb(a, b)
    padded = np.array([[0, -1], [1, 0]], dtype=np.int64)
    lengths = np.array([1, 2], dtype=np.int64)
    _edit_distance_matrix_nb(padded, lengths)
    indptr = np.array([0, 1, 2], dtype=np.int64)
    indices = np.array([1, 0], dtype=np.int64)
    _bfs_matrix_nb(indptr, indices, 2)
