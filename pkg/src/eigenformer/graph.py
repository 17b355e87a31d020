"""Simple undirected graphs and the combinatorial utilities the pipeline needs."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Graph",
    "Target",
    "GraphError",
    "SelfLoopError",
    "DuplicateEdgeError",
    "IndexRangeError",
    "FeatureLengthError",
    "DisconnectedGraphError",
    "build_graph",
    "degree_vector",
    "connected_components",
    "is_connected",
    "diameter",
    "permute",
    "inverse_permutation",
    "adjacency_matrix",
]


class GraphError(ValueError):
    """Base class for graph validation failures."""


class SelfLoopError(GraphError):
    pass


class DuplicateEdgeError(GraphError):
    pass


class IndexRangeError(GraphError):
    pass


class FeatureLengthError(GraphError):
    pass


class DisconnectedGraphError(GraphError):
    pass


TARGET_KINDS = ("graph-scalar", "graph-vector", "node-classes")


@dataclass(frozen=True, eq=False)
class Target:
    """Tagged label payload: ``graph-scalar``, ``graph-vector`` or ``node-classes``."""

    kind: str
    value: np.ndarray

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise GraphError(f"unknown target kind {self.kind!r}")
        v = np.array(self.value)
        if self.kind == "graph-scalar":
            v = v.astype(np.float64).reshape(1)
        elif self.kind == "graph-vector":
            v = v.astype(np.float64).reshape(-1)
        else:
            if v.dtype.kind not in "iu" and not np.all(v == np.round(v)):
                raise GraphError("node-classes target must hold integer class ids")
            v = v.astype(np.int64).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "value", v)

    @classmethod
    def infer(cls, value, num_nodes: int) -> "Target":
        """Best-effort tagging of a raw payload.

        Integer lists of length ``num_nodes`` become node classes; other lists
        are graph vectors; anything scalar is a graph scalar.
        """
        arr = np.asarray(value)
        if arr.ndim == 0:
            return cls("graph-scalar", arr)
        if arr.dtype.kind in "iu" and arr.shape == (num_nodes,):
            return cls("node-classes", arr)
        return cls("graph-vector", arr)

    def __eq__(self, other):
        return (
            isinstance(other, Target)
            and self.kind == other.kind
            and np.array_equal(self.value, other.value)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable simple graph.

    ``edges`` is an ``(m, 2)`` int array of canonical ``(min, max)`` pairs in
    lexicographic order. ``node_features`` has one row (or one int code) per
    node; ``edge_features`` is ``None`` or aligned with ``edges``. ``target``
    is an opaque payload interpreted by the training head.
    """

    num_nodes: int
    edges: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray | None = None
    target: Target | None = None
    _adj: tuple = field(default=None, repr=False, compare=False)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        if self._adj is None:
            adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
            for i, j in self.edges.tolist():
                adj[i].append(j)
                adj[j].append(i)
            object.__setattr__(self, "_adj", tuple(tuple(sorted(a)) for a in adj))
        return self._adj

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.edges}

    def same_as(self, other: "Graph") -> bool:
        """Structural and payload equality (arrays compared exactly)."""
        if self.num_nodes != other.num_nodes:
            return False
        if not np.array_equal(self.edges, other.edges):
            return False
        if not np.array_equal(self.node_features, other.node_features):
            return False
        if (self.edge_features is None) != (other.edge_features is None):
            return False
        if self.edge_features is not None and not np.array_equal(
            self.edge_features, other.edge_features
        ):
            return False
        return self.target == other.target


def _as_feature_array(values, length: int, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype.kind not in "iuf":
        arr = arr.astype(np.float64)
    if arr.ndim == 0 or arr.shape[0] != length:
        got = "scalar" if arr.ndim == 0 else arr.shape[0]
        raise FeatureLengthError(f"{what}: expected {length} rows, got {got}")
    if arr.dtype.kind == "f":
        arr = arr.astype(np.float64)
    elif arr.dtype.kind in "iu":
        arr = arr.astype(np.int64)
    arr.setflags(write=False)
    return arr


def build_graph(
    num_nodes: int,
    edges: Sequence[Sequence[int]],
    node_features=None,
    edge_features=None,
    target=None,
) -> Graph:
    """Validate and canonicalise a simple undirected graph.

    Edges are stored as ``(min, max)`` pairs sorted lexicographically; edge
    features are reordered to stay aligned. ``node_features`` defaults to a
    zero categorical code per node.
    """
    if num_nodes < 0:
        raise IndexRangeError(f"num_nodes must be nonnegative, got {num_nodes}")
    pairs = []
    seen: set[tuple[int, int]] = set()
    for pos, edge in enumerate(edges):
        if len(edge) != 2:
            raise GraphError(f"edge {pos} is not a pair: {edge!r}")
        i, j = int(edge[0]), int(edge[1])
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise IndexRangeError(
                f"edge {pos} ({i}, {j}) out of range for {num_nodes} nodes"
            )
        if i == j:
            raise SelfLoopError(f"edge {pos} is a self-loop on node {i}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise DuplicateEdgeError(f"edge {pos} duplicates {key}")
        seen.add(key)
        pairs.append(key)

    order = sorted(range(len(pairs)), key=pairs.__getitem__)
    edge_arr = np.array([pairs[k] for k in order], dtype=np.int64).reshape(-1, 2)
    edge_arr.setflags(write=False)

    if node_features is None:
        node_features = np.zeros(num_nodes, dtype=np.int64)
    x = _as_feature_array(node_features, num_nodes, "node_features")

    e = None
    if edge_features is not None:
        e = _as_feature_array(edge_features, len(pairs), "edge_features")
        e = e[order] if len(order) else e
        e.setflags(write=False)

    if target is not None and not isinstance(target, Target):
        target = Target.infer(target, num_nodes)
    if target is not None and target.kind == "node-classes":
        if target.value.shape[0] != num_nodes:
            raise FeatureLengthError(
                f"node-classes target has {target.value.shape[0]} entries for {num_nodes} nodes"
            )
    return Graph(num_nodes, edge_arr, x, e, target)


def degree_vector(g: Graph) -> np.ndarray:
    deg = np.zeros(g.num_nodes, dtype=np.int64)
    if g.num_edges:
        np.add.at(deg, g.edges[:, 0], 1)
        np.add.at(deg, g.edges[:, 1], 1)
    return deg


def connected_components(g: Graph) -> np.ndarray:
    """Component label per node, numbered from 0 in order of first appearance."""
    labels = np.full(g.num_nodes, -1, dtype=np.int64)
    nbrs = g.neighbors
    current = 0
    for start in range(g.num_nodes):
        if labels[start] >= 0:
            continue
        labels[start] = current
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if labels[v] < 0:
                    labels[v] = current
                    queue.append(v)
        current += 1
    return labels


def is_connected(g: Graph) -> bool:
    return g.num_nodes <= 1 or int(connected_components(g).max()) == 0


def _bfs_depths(nbrs, source: int, n: int) -> np.ndarray:
    dist = np.full(n, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in nbrs[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def diameter(g: Graph) -> int:
    """Longest shortest-path hop count, by BFS from every node.

    Raises DisconnectedGraphError when some pair is unreachable.
    """
    if g.num_nodes == 0:
        raise DisconnectedGraphError("diameter of the empty graph is undefined")
    nbrs = g.neighbors
    best = 0
    for s in range(g.num_nodes):
        dist = _bfs_depths(nbrs, s, g.num_nodes)
        if (dist < 0).any():
            raise DisconnectedGraphError(
                f"graph with {g.num_nodes} nodes is disconnected; diameter undefined"
            )
        best = max(best, int(dist.max()))
    return best


def inverse_permutation(p: Sequence[int]) -> np.ndarray:
    p = np.asarray(p, dtype=np.int64)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size)
    return inv


def _check_permutation(p, n: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.int64)
    if p.shape != (n,):
        raise GraphError(f"permutation of length {p.size} does not fit {n} nodes")
    if not np.array_equal(np.sort(p), np.arange(n)):
        raise GraphError("mapping is not a bijection on node indices")
    return p


def permute(g: Graph, p: Sequence[int]) -> Graph:
    """Relabel node ``i`` as ``p[i]``; features and per-node targets move along."""
    p = _check_permutation(p, g.num_nodes)
    inv = inverse_permutation(p)
    edges = [(int(p[i]), int(p[j])) for i, j in g.edges]
    x = g.node_features[inv]
    target = g.target
    if target is not None and target.kind == "node-classes":
        target = Target("node-classes", target.value[inv])
    return build_graph(g.num_nodes, edges, x, g.edge_features, target)


def adjacency_matrix(g: Graph) -> np.ndarray:
    a = np.zeros((g.num_nodes, g.num_nodes), dtype=np.float64)
    if g.num_edges:
        a[g.edges[:, 0], g.edges[:, 1]] = 1.0
        a[g.edges[:, 1], g.edges[:, 0]] = 1.0
    return a
