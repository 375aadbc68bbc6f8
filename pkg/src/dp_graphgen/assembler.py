"""Build a synthetic undirected graph from a multiset of generated node pairs."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .graph import Graph

DEFAULT_SAMPLE_VOLUME = 400_000


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreMatrix:
    """Square count matrix ``S``; ``counts[i, j]`` is how often pair ``(i, j)`` was generated."""

    counts: sp.csr_matrix
    symmetrized: bool = False
    dropped_self_pairs: int = 0

    @property
    def size(self) -> int:
        return self.counts.shape[0]

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.counts.sum(axis=1)).ravel()

    def score(self, pairs) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return np.asarray(self.counts[pairs[:, 0], pairs[:, 1]]).ravel()

    def __add__(self, other: "ScoreMatrix") -> "ScoreMatrix":
        if self.symmetrized or other.symmetrized:
            raise ValueError("merge raw counts before symmetrizing")
        return ScoreMatrix((self.counts + other.counts).tocsr(), False,
                           self.dropped_self_pairs + other.dropped_self_pairs)


def count_edges(samples, num_nodes: int) -> ScoreMatrix:
    """Count ordered pairs. Self-pairs are dropped and tallied."""
    pairs = np.asarray(samples, dtype=np.int64).reshape(-1, 2)
    if len(pairs) and (pairs.min() < 0 or pairs.max() >= num_nodes):
        raise ValueError(f"node id outside [0, {num_nodes})")
    self_pair = pairs[:, 0] == pairs[:, 1]
    pairs = pairs[~self_pair]
    counts = sp.coo_matrix((np.ones(len(pairs), dtype=np.int64), (pairs[:, 0], pairs[:, 1])),
                           shape=(num_nodes, num_nodes)).tocsr()
    counts.sum_duplicates()
    return ScoreMatrix(counts, False, int(self_pair.sum()))


def symmetrize(sm: ScoreMatrix) -> ScoreMatrix:
    """``s_ij = s_ji = max(s_ij, s_ji)``."""
    sym = sm.counts.maximum(sm.counts.T).tocsr()
    sym.eliminate_zeros()
    return replace(sm, counts=sym, symmetrized=True)


@dataclass
class AssemblyStats:
    phase1_edges: int
    phase2_edges: int
    isolated_nodes: int
    support_pairs: int
    phase1_neighbors: dict[int, int]


def assemble_graph(sm: ScoreMatrix, target_edges: int, seed: int,
                   return_stats: bool = False):
    """Sample an undirected graph with exactly ``target_edges`` unique edges.

    Every node with a positive row first receives one neighbour drawn from its
    row distribution. Further edges are drawn with probability proportional to
    ``s_ij`` among pairs not yet present until the target is met.
    """
    if not sm.symmetrized:
        raise ValueError("score matrix must be symmetrized first")
    n = sm.size
    upper = sp.triu(sm.counts, k=1).tocoo()
    support = len(upper.data)
    if support == 0:
        raise AssemblyError("score matrix has no positive entries")
    if target_edges > support:
        raise AssemblyError(f"support allows at most {support} edges, {target_edges} requested")

    rng = np.random.default_rng(seed)
    csr = sm.counts
    row_sums = sm.row_sums()
    supported = np.flatnonzero(row_sums > 0)

    # phase 1: one neighbour per supported node
    u = rng.random(len(supported))
    chosen = np.empty(len(supported), dtype=np.int64)
    for k, i in enumerate(supported):
        lo, hi = csr.indptr[i], csr.indptr[i + 1]
        cdf = np.cumsum(csr.data[lo:hi])
        pos = int(np.searchsorted(cdf, u[k] * cdf[-1], side="right"))
        chosen[k] = csr.indices[lo + min(pos, hi - lo - 1)]
    phase1 = np.unique(np.sort(np.stack([supported, chosen], axis=1), axis=1), axis=0)
    if len(phase1) > target_edges:
        raise AssemblyError(
            f"phase 1 alone yields {len(phase1)} edges, above the target of {target_edges}")

    # phase 2: successive weighted draws without replacement over the remaining pairs.
    # Exponential-key ordering (Efraimidis-Spirakis) has the same law as repeated
    # sampling with rejection of duplicates.
    keys = upper.row.astype(np.int64) * n + upper.col
    remaining = ~np.isin(keys, phase1[:, 0] * n + phase1[:, 1])
    need = target_edges - len(phase1)
    rows, cols, w = upper.row[remaining], upper.col[remaining], upper.data[remaining].astype(np.float64)
    if need > 0:
        order_key = rng.exponential(size=len(w)) / w
        pick = np.argpartition(order_key, need - 1)[:need] if need < len(w) else np.arange(len(w))
        extra = np.stack([rows[pick], cols[pick]], axis=1).astype(np.int64)
        edges = np.concatenate([phase1, extra])
    else:
        edges = phase1
    graph = Graph.from_pairs(edges, n)
    if not return_stats:
        return graph
    stats = AssemblyStats(len(phase1), max(need, 0), int(n - len(supported)), support,
                          dict(zip(supported.tolist(), chosen.tolist())))
    return graph, stats


def write_samples(path, samples: np.ndarray) -> None:
    """One generated sequence per line, node ids separated by spaces."""
    np.savetxt(path, np.asarray(samples, dtype=np.int64), fmt="%d")


def read_samples(path) -> np.ndarray:
    arr = np.loadtxt(path, dtype=np.int64, ndmin=2)
    return arr
