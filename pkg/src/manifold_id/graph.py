"""k-NN neighborhood graphs and graph-induced geodesic distances."""

from __future__ import annotations

import hashlib
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import DataError, DisconnectedGraphError
from .features import FeatureMatrix, Metric, as_metric, distance_matrix

MIN_EDGE_WEIGHT = 1e-12
DEFAULT_MAX_SOURCES = 2000


def default_threads() -> int:
    env = os.environ.get("MANIFOLD_ID_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class NeighborOrder:
    """Per-row nearest neighbors sorted by (distance, index), self excluded.

    Computing this once for the largest ``k`` lets a sweep over ``k`` reuse it:
    the neighbors for a smaller ``k`` are a prefix of each row.
    """

    index: np.ndarray  # (n, kmax) int64
    rank_distance: np.ndarray  # (n, kmax) float64
    metric: Metric

    @property
    def kmax(self) -> int:
        return self.index.shape[1]


def neighbor_order(m: FeatureMatrix, kmax: int, metric="euclidean", chunk_size: int = 1024) -> NeighborOrder:
    """Exact brute-force k nearest neighbors with ties broken by lower index."""
    metric = as_metric(metric)
    n = m.n
    if not 1 <= kmax < n:
        raise DataError(f"k must satisfy 1 <= k < n (k={kmax}, n={n})")
    x = m.values()
    index = np.empty((n, kmax), dtype=np.int64)
    dist = np.empty((n, kmax), dtype=np.float64)
    for start in range(0, n, chunk_size):
        stop = min(n, start + chunk_size)
        block = distance_matrix(x[start:stop], x, metric)
        rows = np.arange(stop - start)
        block[rows, rows + start] = np.inf
        kth = np.partition(block, kmax - 1, axis=1)[:, kmax - 1]
        for r in rows:
            cand = np.flatnonzero(block[r] <= kth[r])
            order = np.lexsort((cand, block[r, cand]))[:kmax]
            index[start + r] = cand[order]
            dist[start + r] = block[r, cand[order]]
    return NeighborOrder(index, dist, metric)


@dataclass(frozen=True)
class NeighborGraph:
    """Undirected weighted k-NN graph stored as a symmetric CSR matrix."""

    n: int
    k: int
    matrix: sparse.csr_matrix
    metric: Metric
    symmetrize: str

    @property
    def symmetrized(self) -> bool:
        return True

    @property
    def n_edges(self) -> int:
        return self.matrix.nnz // 2

    def degrees(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def adjacency(self) -> List[List[Tuple[int, float]]]:
        """Per-node list of ``(neighbor, weight)`` sorted by neighbor index."""
        mat = self.matrix
        out = []
        for i in range(self.n):
            lo, hi = mat.indptr[i], mat.indptr[i + 1]
            out.append([(int(j), float(w)) for j, w in zip(mat.indices[lo:hi], mat.data[lo:hi])])
        return out

    def edges(self) -> np.ndarray:
        """Undirected edges ``(src, dst, weight)`` with ``src < dst``, sorted."""
        coo = sparse.triu(self.matrix, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return np.column_stack([coo.row[order], coo.col[order], coo.data[order]])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        e = self.edges()
        h.update(np.ascontiguousarray(e[:, :2]).astype("<i8").tobytes())
        h.update(np.ascontiguousarray(e[:, 2]).astype("<f8").tobytes())
        return h.hexdigest()[:16]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("src,dst,weight\n")
            for s, d, w in self.edges().tolist():
                fh.write(f"{int(s)},{int(d)},{w!r}\n")


def _edge_weights(x, src, dst, metric: Metric) -> np.ndarray:
    a, b = x[src], x[dst]
    if metric is Metric.EUCLIDEAN:
        w = np.sqrt(np.sum((a - b) ** 2, axis=1))
    else:
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        if np.any(na == 0) or np.any(nb == 0):
            raise DataError("zero-norm vector under an angular metric")
        w = np.arccos(np.clip(np.sum(a * b, axis=1) / (na * nb), -1.0, 1.0))
    return w


def graph_from_order(m: FeatureMatrix, order: NeighborOrder, k: int, symmetrize: str = "union") -> NeighborGraph:
    """Build the graph for ``k <= order.kmax`` from a precomputed neighbor order."""
    if symmetrize not in ("union", "mutual"):
        raise DataError(f"symmetrize must be 'union' or 'mutual', got {symmetrize!r}")
    if not 1 <= k <= order.kmax:
        raise DataError(f"k={k} outside 1..{order.kmax}")
    n = m.n
    src = np.repeat(np.arange(n, dtype=np.int64), k)
    dst = order.index[:, :k].ravel()
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    keys = lo * n + hi
    uniq, counts = np.unique(keys, return_counts=True)
    if symmetrize == "mutual":
        uniq = uniq[counts == 2]
    lo, hi = uniq // n, uniq % n
    edge_metric = order.metric.edge_metric
    w = _edge_weights(m.values(), lo, hi, edge_metric)
    tiny = w < MIN_EDGE_WEIGHT
    if tiny.any():
        warnings.warn(
            f"{int(tiny.sum())} zero-length edges (duplicate points); weights floored at {MIN_EDGE_WEIGHT}",
            RuntimeWarning,
            stacklevel=2,
        )
        w = np.maximum(w, MIN_EDGE_WEIGHT)
    rows = np.concatenate([lo, hi])
    cols = np.concatenate([hi, lo])
    mat = sparse.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n, n))
    mat.sort_indices()
    return NeighborGraph(n, k, mat, edge_metric, symmetrize)


def build_knn_graph(m: FeatureMatrix, k: int, metric="euclidean", symmetrize: str = "union") -> NeighborGraph:
    """k-NN graph over the rows of ``m``.

    Each node selects its ``k`` nearest distinct other nodes (ties by lower
    index); ``symmetrize="union"`` keeps an edge if either endpoint selected
    the other, ``"mutual"`` only if both did. Edge weights are the metric
    distance (arc length when ranking by cosine distance).
    """
    order = neighbor_order(m, k, metric)
    return graph_from_order(m, order, k, symmetrize)


def graph_from_edges(n: int, edges, metric="euclidean") -> NeighborGraph:
    """Graph from explicit undirected ``(src, dst, weight)`` triples."""
    edges = np.asarray(edges, dtype=np.float64).reshape(-1, 3)
    src = edges[:, 0].astype(np.int64)
    dst = edges[:, 1].astype(np.int64)
    w = edges[:, 2]
    if np.any(src == dst):
        raise DataError("self-loops are not allowed")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise DataError("edge weights must be positive and finite")
    mat = sparse.csr_matrix(
        (np.concatenate([w, w]), (np.concatenate([src, dst]), np.concatenate([dst, src]))), shape=(n, n)
    )
    mat.sum_duplicates()
    mat.sort_indices()
    return NeighborGraph(n, 0, mat, as_metric(metric), "union")


class Connectivity(NamedTuple):
    connected: bool
    component_sizes: List[int]


def is_connected(g: NeighborGraph) -> Connectivity:
    n_comp, labels = csgraph.connected_components(g.matrix, directed=False)
    sizes = sorted(np.bincount(labels, minlength=n_comp).tolist(), reverse=True)
    return Connectivity(n_comp == 1, sizes)


@dataclass(frozen=True)
class GeodesicSample:
    """Shortest-path distances from a set of source nodes to every node.

    ``matrix[s, j]`` is the geodesic from ``sources[s]`` to node ``j``. When
    every node is a source the pair list covers each unordered pair once;
    otherwise it holds every ``(source, j)`` pair with ``j != source``.
    """

    n: int
    sources: np.ndarray
    matrix: np.ndarray
    seed: Optional[int] = None
    _pairs_cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def complete(self) -> bool:
        return len(self.sources) == self.n

    @property
    def coverage(self) -> float:
        s, n = len(self.sources), self.n
        total = n * (n - 1) / 2
        if total == 0:
            return 1.0
        return (s * (n - 1) - s * (s - 1) / 2) / total

    def _mask(self) -> np.ndarray:
        cols = np.arange(self.n)[None, :]
        if self.complete:
            return cols > self.sources[:, None]
        return cols != self.sources[:, None]

    def pairs(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(i, j, r)`` arrays in source order then target order."""
        if "pairs" not in self._pairs_cache:
            mask = self._mask()
            rows, cols = np.nonzero(mask)
            self._pairs_cache["pairs"] = (self.sources[rows], cols, self.matrix[rows, cols])
        return self._pairs_cache["pairs"]

    @property
    def distances(self) -> np.ndarray:
        return self.matrix[self._mask()]

    def __len__(self) -> int:
        return int(self._mask().sum())

    def to_bytes(self) -> bytes:
        return (
            np.asarray([self.n, len(self.sources)], dtype="<i8").tobytes()
            + self.sources.astype("<i8").tobytes()
            + self.matrix.astype("<f8").tobytes()
        )

    def to_csv(self, path):
        i, j, r = self.pairs()
        with open(path, "w") as fh:
            fh.write("i,j,r\n")
            for a, b, c in zip(i.tolist(), j.tolist(), r.tolist()):
                fh.write(f"{a},{b},{c!r}\n")

    def dense(self, fill=np.nan) -> np.ndarray:
        """``n x n`` matrix with known geodesics filled symmetrically."""
        out = np.full((self.n, self.n), fill, dtype=np.float64)
        out[self.sources, :] = self.matrix
        out[:, self.sources] = self.matrix.T
        return out


def _dijkstra_block(matrix, sources):
    return csgraph.dijkstra(matrix, directed=False, indices=sources)


def geodesic_distances(
    g: NeighborGraph,
    n_sources=None,
    seed: int = 0,
    threads: Optional[int] = None,
    pair_budget=None,
) -> GeodesicSample:
    """Exact shortest paths from sampled sources.

    Parameters
    ----------
    g : NeighborGraph
        Must be connected.
    n_sources : int or "all", optional
        Number of source nodes. Defaults to ``min(n, 2000)``.
    seed : int
        Seed for drawing sources when fewer than ``n`` are used.
    threads : int, optional
        Worker threads; results are merged in source order, so the output
        does not depend on this value.
    pair_budget : int or "all", optional
        Alternative to ``n_sources``: the number of pairs wanted. Sources are
        added until ``n_sources * (n - 1)`` reaches the budget.
    """
    conn = is_connected(g)
    if not conn.connected:
        raise DisconnectedGraphError(conn.component_sizes)
    n = g.n
    if pair_budget is not None:
        if pair_budget == "all":
            n_sources = "all"
        else:
            n_sources = max(1, math.ceil(int(pair_budget) / max(n - 1, 1)))
    if n_sources is None:
        n_sources = min(n, DEFAULT_MAX_SOURCES)
    if n_sources == "all" or int(n_sources) >= n:
        sources = np.arange(n, dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        sources = np.sort(rng.choice(n, size=int(n_sources), replace=False)).astype(np.int64)

    threads = default_threads() if threads is None else max(1, int(threads))
    chunks = np.array_split(sources, max(1, min(len(sources), threads * 4)))
    chunks = [c for c in chunks if len(c)]
    if threads == 1 or len(chunks) == 1:
        blocks = [_dijkstra_block(g.matrix, c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(lambda c: _dijkstra_block(g.matrix, c), chunks))
    matrix = np.vstack(blocks)
    if not np.all(np.isfinite(matrix)):
        raise DataError("unreachable pair in a connected graph")
    return GeodesicSample(n, sources, matrix, seed)
