"""Undirected graph model, edge-list ingestion, LCC extraction, splitting and batch sampling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)


class EdgeListParseError(ValueError):
    pass


class SplitError(ValueError):
    pass


def _canonical_edges(pairs: np.ndarray) -> np.ndarray:
    """Sort each pair so u < v, drop self-loops and duplicates, sort rows."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.sort(pairs, axis=1)
    if len(pairs) == 0:
        return np.empty((0, 2), dtype=np.int64)
    return np.unique(pairs, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected simple graph stored as a COO edge index.

    ``edges`` holds each undirected edge once as a row ``(u, v)`` with ``u < v``,
    rows sorted lexicographically.
    """

    num_nodes: int
    edges: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if edges.min() < 0 or edges.max() >= self.num_nodes:
                raise ValueError("edge endpoint outside [0, num_nodes)")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValueError("edges must be canonical (u < v); use Graph.from_pairs")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise ValueError("duplicate edges")
        edges = edges.copy()
        edges.flags.writeable = False
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_pairs(cls, pairs, num_nodes: int | None = None) -> "Graph":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if num_nodes is None:
            num_nodes = int(pairs.max()) + 1 if len(pairs) else 0
        return cls(num_nodes, _canonical_edges(pairs))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def directed_edges(self) -> np.ndarray:
        """Both orientations of every edge, shape (2|E|, 2)."""
        return np.concatenate([self.edges, self.edges[:, ::-1]])

    def adjacency(self) -> sp.csr_matrix:
        d = self.directed_edges()
        data = np.ones(len(d), dtype=np.int64)
        return sp.csr_matrix((data, (d[:, 0], d[:, 1])), shape=(self.num_nodes, self.num_nodes))

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.edges.tolist()))

    def has_edges(self, pairs) -> np.ndarray:
        """Vectorised membership test for (possibly unordered) pairs."""
        pairs = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
        keys = self.edges[:, 0] * self.num_nodes + self.edges[:, 1]
        return np.isin(pairs[:, 0] * self.num_nodes + pairs[:, 1], keys)

    def is_connected(self) -> bool:
        if self.num_nodes == 0:
            return False
        n_comp, _ = connected_components(self.adjacency(), directed=False)
        return n_comp == 1

    def to_text(self, header: bool = True) -> str:
        lines = [f"# nodes={self.num_nodes}"] if header else []
        lines.extend(f"{u} {v}" for u, v in self.edges.tolist())
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return self.num_nodes == other.num_nodes and np.array_equal(self.edges, other.edges)

    def __repr__(self):
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges})"


@dataclass
class IngestStats:
    lines_read: int = 0
    self_loops_dropped: int = 0
    duplicates_dropped: int = 0


def load_edge_list(text: str) -> tuple[Graph, IngestStats]:
    """Parse ``"<u> <v>"`` lines into a deduplicated undirected simple graph.

    ``#`` starts a comment. A first line of the form ``# nodes=<N>`` fixes the
    node count; otherwise it is ``1 + max id``.
    """
    stats = IngestStats()
    header_nodes = None
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body, _, comment = raw.partition("#")
        if lineno == 1 and not body.strip() and comment.strip().startswith("nodes="):
            try:
                header_nodes = int(comment.strip()[len("nodes="):])
            except ValueError:
                raise EdgeListParseError(f"line {lineno}: bad nodes header {raw!r}") from None
            continue
        tokens = body.split()
        if not tokens:
            continue
        if len(tokens) != 2:
            raise EdgeListParseError(f"line {lineno}: expected two node ids, got {raw!r}")
        try:
            u, v = int(tokens[0]), int(tokens[1])
        except ValueError:
            raise EdgeListParseError(f"line {lineno}: non-integer node id in {raw!r}") from None
        if u < 0 or v < 0:
            raise EdgeListParseError(f"line {lineno}: negative node id in {raw!r}")
        stats.lines_read += 1
        pairs.append((u, v))

    if not pairs and header_nodes is None:
        raise EdgeListParseError("empty edge list")

    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    max_id = int(arr.max()) if len(arr) else -1
    num_nodes = max_id + 1
    if header_nodes is not None:
        if header_nodes <= max_id:
            raise EdgeListParseError(f"header nodes={header_nodes} but id {max_id} present")
        num_nodes = header_nodes

    stats.self_loops_dropped = int(np.sum(arr[:, 0] == arr[:, 1]))
    edges = _canonical_edges(arr)
    stats.duplicates_dropped = stats.lines_read - stats.self_loops_dropped - len(edges)
    if stats.self_loops_dropped:
        logger.warning("dropped %d self-loops", stats.self_loops_dropped)
    return Graph(num_nodes, edges), stats


def read_edge_list(path) -> tuple[Graph, IngestStats]:
    return load_edge_list(Path(path).read_text(encoding="utf-8"))


def write_edge_list(path, graph: Graph) -> None:
    Path(path).write_text(graph.to_text(), encoding="utf-8")


def largest_connected_component(g: Graph) -> tuple[Graph, np.ndarray]:
    """Return the LCC relabelled to ``0..n'-1`` and the new-id -> original-id table.

    Ties in component size go to the component holding the smallest node id.
    """
    if g.num_nodes == 0:
        raise ValueError("empty graph")
    _, labels = connected_components(g.adjacency(), directed=False)
    sizes = np.bincount(labels)
    # labels are assigned in order of first appearance, so the lowest label among
    # the largest components is the one containing the smallest node id
    best = int(np.flatnonzero(sizes == sizes.max())[0])
    keep = np.flatnonzero(labels == best)
    remap = -np.ones(g.num_nodes, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    mask = labels[g.edges[:, 0]] == best
    new_edges = remap[g.edges[mask]]
    return Graph(len(keep), new_edges), keep


def _uniform_spanning_tree(g: Graph, rng: np.random.Generator) -> np.ndarray:
    """Wilson's algorithm: loop-erased random walks give a uniform spanning tree.

    Returns a boolean mask over ``g.edges`` marking tree edges.
    """
    adj = g.adjacency()
    indptr, indices = adj.indptr, adj.indices
    n = g.num_nodes
    in_tree = np.zeros(n, dtype=bool)
    nxt = -np.ones(n, dtype=np.int64)
    root = int(rng.integers(n))
    in_tree[root] = True
    for start in rng.permutation(n):
        u = int(start)
        while not in_tree[u]:
            deg = indptr[u + 1] - indptr[u]
            nxt[u] = indices[indptr[u] + rng.integers(deg)]
            u = int(nxt[u])
        u = int(start)
        while not in_tree[u]:
            in_tree[u] = True
            u = int(nxt[u])
    child = np.flatnonzero(nxt >= 0)
    tree = np.sort(np.stack([child, nxt[child]], axis=1), axis=1)
    return np.isin(g.edges[:, 0] * n + g.edges[:, 1], tree[:, 0] * n + tree[:, 1])


@dataclass(eq=False)
class EdgeSplit:
    train: Graph
    validation_edges: np.ndarray
    validation_non_edges: np.ndarray
    seed: int
    val_fraction: float
    notes: list[str] = field(default_factory=list)

    def __eq__(self, other):
        return (
            isinstance(other, EdgeSplit)
            and self.train == other.train
            and np.array_equal(self.validation_edges, other.validation_edges)
            and np.array_equal(self.validation_non_edges, other.validation_non_edges)
            and self.seed == other.seed
            and self.val_fraction == other.val_fraction
        )

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        n = self.train.num_nodes
        write_edge_list(d / "train.txt", self.train)
        write_edge_list(d / "val_edges.txt", Graph(n, self.validation_edges))
        write_edge_list(d / "val_non_edges.txt", Graph(n, self.validation_non_edges))
        manifest = {
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "num_nodes": n,
            "train_edges": self.train.num_edges,
            "validation_edges": len(self.validation_edges),
            "notes": self.notes,
        }
        (d / "split.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "EdgeSplit":
        d = Path(directory)
        manifest = json.loads((d / "split.json").read_text())
        train, _ = read_edge_list(d / "train.txt")
        val, _ = read_edge_list(d / "val_edges.txt")
        non, _ = read_edge_list(d / "val_non_edges.txt")
        return cls(train, val.edges, non.edges, manifest["seed"], manifest["val_fraction"],
                   manifest.get("notes", []))


def split_edges(g: Graph, val_fraction: float, seed: int) -> EdgeSplit:
    """Hold out ``round(val_fraction * |E|)`` edges while keeping the train graph connected.

    A uniformly random spanning tree is protected from selection; an equal number
    of non-edges is drawn uniformly from the complement.
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    n_edges = g.num_edges
    n_val = int(math.floor(val_fraction * n_edges + 0.5))
    if n_val < 1:
        raise SplitError(f"val_fraction {val_fraction} selects no edges out of {n_edges}")
    if not g.is_connected():
        raise SplitError("split_edges requires a connected graph (take the LCC first)")
    spare = n_edges - (g.num_nodes - 1)
    if n_val > spare:
        raise SplitError(
            f"cannot keep train graph connected: at most {spare} of {n_edges} edges are "
            f"non-bridge-protected, max feasible fraction {spare / n_edges:.4f}"
        )

    rng = np.random.default_rng(seed)
    tree_mask = _uniform_spanning_tree(g, rng)
    candidates = np.flatnonzero(~tree_mask)
    chosen = np.sort(rng.choice(candidates, size=n_val, replace=False))
    keep = np.ones(n_edges, dtype=bool)
    keep[chosen] = False
    val_edges = g.edges[chosen]

    n = g.num_nodes
    complement = n * (n - 1) // 2 - n_edges
    if complement < n_val:
        raise SplitError("graph too dense to sample validation non-edges")
    taken = set(map(int, g.edges[:, 0] * n + g.edges[:, 1]))
    non_edges = []
    while len(non_edges) < n_val:
        draw = rng.integers(0, n, size=(2 * (n_val - len(non_edges)) + 8, 2))
        for u, v in draw.tolist():
            if u == v:
                continue
            if u > v:
                u, v = v, u
            key = u * n + v
            if key in taken:
                continue
            taken.add(key)
            non_edges.append((u, v))
            if len(non_edges) == n_val:
                break
    non_edges = np.array(sorted(non_edges), dtype=np.int64).reshape(-1, 2)

    return EdgeSplit(
        train=Graph(n, g.edges[keep]),
        validation_edges=val_edges,
        validation_non_edges=non_edges,
        seed=seed,
        val_fraction=val_fraction,
        notes=["train connectivity enforced by protecting a uniform random spanning tree"],
    )


def _batch_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step)])


def sample_edge_batch(g: Graph, m: int, seed: int, step: int) -> np.ndarray:
    """``m`` distinct edges drawn without replacement, each in a random orientation."""
    if m > g.num_edges:
        raise ValueError(f"batch size {m} exceeds edge count {g.num_edges}")
    rng = _batch_rng(seed, step)
    idx = rng.choice(g.num_edges, size=m, replace=False)
    batch = g.edges[idx].copy()
    flip = rng.random(m) < 0.5
    batch[flip] = batch[flip, ::-1]
    return batch


def sample_edge_batch_poisson(g: Graph, q: float, seed: int, step: int) -> np.ndarray:
    """Include each edge independently with probability ``q`` (random orientation)."""
    rng = _batch_rng(seed, step)
    batch = g.edges[rng.random(g.num_edges) < q].copy()
    flip = rng.random(len(batch)) < 0.5
    batch[flip] = batch[flip, ::-1]
    return batch


def sample_random_walks(g: Graph, length: int, m: int, seed: int, step: int,
                        start: int | None = None) -> np.ndarray:
    """``m`` uniform random walks of ``length`` nodes, shape ``(m, length)``."""
    if length < 2:
        raise ValueError("walk length must be >= 2")
    rng = _batch_rng(seed, step)
    adj = g.adjacency()
    indptr, indices = adj.indptr, adj.indices
    deg = np.diff(indptr)
    walks = np.empty((m, length), dtype=np.int64)
    if start is None:
        walks[:, 0] = rng.integers(0, g.num_nodes, size=m)
    else:
        walks[:, 0] = start
    for t in range(1, length):
        cur = walks[:, t - 1]
        if np.any(deg[cur] == 0):
            raise ValueError("random walk reached an isolated node")
        offset = (rng.random(m) * deg[cur]).astype(np.int64)
        walks[:, t] = indices[indptr[cur] + offset]
    return walks
