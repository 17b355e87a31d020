"""Graph files, synthetic generators and the binary spectra cache.

Graph files hold one JSON object per line::

    {"n": 3, "edges": [[0, 1], [1, 2]], "x": [0, 1, 0], "y": 0.5}

with optional ``e`` (edge features aligned with ``edges``). A first line of
the form ``{"task": "node-classification"}`` overrides the inferred task.
"""

from __future__ import annotations

import heapq
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import TASKS, FeatureSchema, fnv1a64
from .graph import (
    DisconnectedGraphError,
    Graph,
    GraphError,
    Target,
    build_graph,
    degree_vector,
    diameter,
    is_connected,
)
from .spectral import (
    SOLVER_TOL,
    ZERO_TOL,
    SpectralDistances,
    eigendecompose,
    laplacian,
    sigma_tensor,
    verify_spectrum,
)

__all__ = [
    "DataError",
    "RecordError",
    "SchemaError",
    "GeneratorError",
    "CacheError",
    "CacheVersionError",
    "CacheTruncatedError",
    "CacheMissError",
    "DatasetManifest",
    "parse_graph_lines",
    "write_graph_lines",
    "infer_manifest",
    "SyntheticSpec",
    "parse_generator_spec",
    "generate_synthetic",
    "load_graphs",
    "spectral_target",
    "graph_digest",
    "CacheRecord",
    "compute_record",
    "write_cache",
    "read_cache",
    "SpectraCache",
    "CACHE_VERSION",
]


class DataError(ValueError):
    pass


class RecordError(DataError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source is not None:
            where = f"{source}, "
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.source = source


class SchemaError(DataError):
    pass


class GeneratorError(DataError):
    pass


class CacheError(DataError):
    pass


class CacheVersionError(CacheError):
    pass


class CacheTruncatedError(CacheError):
    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


class CacheMissError(CacheError):
    def __init__(self, message: str, digest: int):
        super().__init__(message)
        self.digest = digest


# ---------------------------------------------------------------------------
# manifests and graph files


@dataclass
class DatasetManifest:
    task: str
    schema: FeatureSchema
    splits: dict[str, int] = field(default_factory=dict)
    source: str = ""
    seed: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = self.schema.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        d["schema"] = FeatureSchema.from_dict(d["schema"])
        return cls(**d)


def _feature_kind(values: np.ndarray, what: str) -> tuple[str, int]:
    if values.ndim == 1:
        if values.size and not np.issubdtype(values.dtype, np.integer):
            raise SchemaError(f"{what}: 1-d features must be integer codes")
        return "categorical", int(values.max()) + 1 if values.size else 1
    return "dense", int(values.shape[1])


_DEFAULT_TASK = {
    "graph-scalar": "graph-regression",
    "graph-vector": "graph-regression",
    "node-classes": "node-classification",
}


def infer_manifest(graphs: Sequence[Graph], task: str | None = None, source: str = "",
                   seed: int | None = None) -> DatasetManifest:
    """Feature schema and task shared by every graph; raises on disagreement."""
    if task is not None and task not in TASKS:
        raise SchemaError(f"unknown task {task!r}")
    if not graphs:
        return DatasetManifest(task or "graph-regression",
                               FeatureSchema("categorical", 1, None, 0, 1), {"all": 0}, source, seed)
    node_kind = edge_kind = None
    node_size = edge_size = 0
    target_kind = None
    outputs = 0
    for k, g in enumerate(graphs):
        nk, ns = _feature_kind(g.node_features, f"graph {k} node features")
        if node_kind is None:
            node_kind = nk
        if nk != node_kind or (nk == "dense" and ns != node_size and k):
            raise SchemaError(f"graph {k}: node features {nk}[{ns}] disagree with {node_kind}[{node_size}]")
        node_size = max(node_size, ns) if nk == "categorical" else ns

        if g.edge_features is None:
            ek, es = None, 0
        else:
            ek, es = _feature_kind(g.edge_features, f"graph {k} edge features")
        if k == 0:
            edge_kind = ek
        if ek != edge_kind or (ek == "dense" and es != edge_size and k):
            raise SchemaError(f"graph {k}: edge features {ek}[{es}] disagree with {edge_kind}[{edge_size}]")
        edge_size = max(edge_size, es) if ek == "categorical" else es

        if g.target is None:
            raise SchemaError(f"graph {k} has no target")
        if target_kind is None:
            target_kind = g.target.kind
        if g.target.kind != target_kind:
            raise SchemaError(f"graph {k}: target kind {g.target.kind} disagrees with {target_kind}")
        v = g.target.value
        if target_kind == "node-classes":
            outputs = max(outputs, int(v.max()) + 1 if v.size else 1)
        elif target_kind == "graph-vector":
            if k and v.size != outputs:
                raise SchemaError(f"graph {k}: target length {v.size} disagrees with {outputs}")
            outputs = v.size
        else:
            outputs = max(outputs, 1)

    if task is None:
        task = _DEFAULT_TASK[target_kind]
    if task == "graph-classification":
        outputs = max(2, max(int(g.target.value.max()) for g in graphs) + 1)
    if task == "node-classification":
        outputs = max(outputs, 2)
    schema = FeatureSchema(node_kind, node_size, edge_kind, edge_size, outputs)
    return DatasetManifest(task, schema, {"all": len(graphs)}, source, seed)


_GRAPH_LEVEL = ("graph-regression", "graph-classification", "multilabel-classification")


def _record_to_graph(rec: dict, task: str | None = None) -> Graph:
    if not isinstance(rec, dict):
        raise GraphError("record must be a JSON object")
    unknown = sorted(set(rec) - {"n", "edges", "x", "e", "y"})
    if unknown:
        raise GraphError(f"unknown field(s) {unknown}")
    for key in ("n", "edges", "y"):
        if key not in rec:
            raise GraphError(f"missing field {key!r}")
    n = rec["n"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise GraphError(f"n must be a positive integer; got {n!r}")
    edges = rec["edges"]
    if not isinstance(edges, list) or any(
        not isinstance(p, list) or len(p) != 2 or not all(isinstance(i, int) for i in p) for p in edges
    ):
        raise GraphError("edges must be a list of [i, j] integer pairs")
    y = rec["y"]
    if task in _GRAPH_LEVEL and isinstance(y, list):
        # a label vector whose length happens to equal n is still graph-level
        y = Target("graph-vector", np.array(y))
    return build_graph(n, edges, rec.get("x"), rec.get("e"), y)


def parse_graph_lines(path: str | Path, task: str | None = None) -> tuple[list[Graph], DatasetManifest]:
    """Read a graph file. Every graph must be connected.

    Errors name the file and the 1-based line. An empty file yields an empty
    dataset; training on it fails later.
    """
    path = Path(path)
    graphs: list[Graph] = []
    header_task = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"malformed JSON ({exc.msg})", lineno, str(path)) from None
            if not graphs and header_task is None and isinstance(rec, dict) and set(rec) == {"task"}:
                header_task = rec["task"]
                if header_task not in TASKS:
                    raise RecordError(f"unknown task {header_task!r}", lineno, str(path))
                continue
            try:
                g = _record_to_graph(rec, task or header_task)
            except (GraphError, ValueError, TypeError) as exc:
                raise RecordError(str(exc), lineno, str(path)) from None
            if not is_connected(g):
                raise RecordError("graph is disconnected", lineno, str(path))
            graphs.append(g)
    try:
        manifest = infer_manifest(graphs, task or header_task, source=str(path))
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    return graphs, manifest


def _jsonable(a: np.ndarray):
    return a.tolist()


def graph_record(g: Graph) -> dict:
    rec = {"n": g.num_nodes, "edges": g.edges.tolist(), "x": _jsonable(g.node_features)}
    if g.edge_features is not None:
        rec["e"] = _jsonable(g.edge_features)
    if g.target is not None:
        v = g.target.value
        rec["y"] = v.item() if g.target.kind == "graph-scalar" else v.tolist()
    return rec


def write_graph_lines(path: str | Path, graphs: Iterable[Graph], task: str | None = None) -> None:
    with open(path, "w") as fh:
        if task is not None:
            fh.write(json.dumps({"task": task}) + "\n")
        for g in graphs:
            fh.write(json.dumps(graph_record(g)) + "\n")


# ---------------------------------------------------------------------------
# synthetic generators


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator parameters.

    kind: ``er`` (connected G(n, p)), ``sbm`` (two planted blocks) or ``tree``.
    n/n_max: node count, drawn uniformly from ``[n, n_max]`` when n_max is set.
    target: ``regression``, ``node``, ``multilabel`` or ``graph-class``;
    ``None`` picks ``node`` for sbm and ``regression`` otherwise.
    edge_types: when positive, each edge gets a random categorical code.
    """

    kind: str
    count: int = 32
    n: int = 12
    n_max: int | None = None
    p: float = 0.3
    p_in: float = 0.9
    p_out: float = 0.05
    reveal: float = 0.2
    target: str | None = None
    edge_types: int = 0
    seed: int = 0
    max_tries: int = 1000

    @property
    def task(self) -> str:
        return {
            "regression": "graph-regression",
            "node": "node-classification",
            "multilabel": "multilabel-classification",
            "graph-class": "graph-classification",
        }[self.resolved_target]

    @property
    def resolved_target(self) -> str:
        if self.target is not None:
            return self.target
        return "node" if self.kind == "sbm" else "regression"

    def to_string(self) -> str:
        parts = [f"{k}={v}" for k, v in asdict(self).items() if k != "kind" and v is not None]
        return f"gen:{self.kind}:" + ",".join(parts)


_SPEC_TYPES = {
    "count": int, "n": int, "n_max": int, "p": float, "p_in": float, "p_out": float,
    "reveal": float, "target": str, "edge_types": int, "seed": int, "max_tries": int,
}


def parse_generator_spec(text: str) -> SyntheticSpec:
    """Parse ``gen:<kind>[:key=value,...]``, e.g. ``gen:sbm:count=64,n=20,seed=0``."""
    parts = text.split(":", 2)
    if len(parts) < 2 or parts[0] != "gen":
        raise GeneratorError(f"generator spec must look like gen:<kind>:k=v,...; got {text!r}")
    kind = parts[1]
    kw: dict = {}
    if len(parts) == 3 and parts[2]:
        for item in parts[2].split(","):
            key, sep, val = item.partition("=")
            if not sep or key not in _SPEC_TYPES:
                raise GeneratorError(f"bad generator parameter {item!r}")
            try:
                kw[key] = _SPEC_TYPES[key](val)
            except ValueError:
                raise GeneratorError(f"bad value for {key}: {val!r}") from None
    spec = SyntheticSpec(kind, **kw)
    _check_spec(spec)
    return spec


def _check_spec(s: SyntheticSpec) -> None:
    problems = []
    if s.kind not in ("er", "sbm", "tree"):
        problems.append(f"unknown generator kind {s.kind!r}")
    if s.count < 0:
        problems.append("count must be nonnegative")
    lo = 4 if s.kind == "sbm" else 2
    if s.n < lo:
        problems.append(f"n must be at least {lo}")
    if s.n_max is not None and s.n_max < s.n:
        problems.append("n_max must be at least n")
    for name in ("p", "p_in", "p_out", "reveal"):
        if not 0.0 <= getattr(s, name) <= 1.0:
            problems.append(f"{name} must lie in [0, 1]")
    if s.target not in (None, "regression", "node", "multilabel", "graph-class"):
        problems.append(f"unknown target {s.target!r}")
    if s.target == "node" and s.kind != "sbm":
        problems.append("node targets need planted blocks (kind sbm)")
    if problems:
        raise GeneratorError("; ".join(problems))


def _er_edges(n: int, p: float, rng: np.random.Generator) -> list[tuple[int, int]]:
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    return list(zip(iu[keep].tolist(), ju[keep].tolist()))


def _sbm_edges(blocks: np.ndarray, p_in: float, p_out: float, rng) -> list[tuple[int, int]]:
    n = blocks.size
    iu, ju = np.triu_indices(n, 1)
    prob = np.where(blocks[iu] == blocks[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    return list(zip(iu[keep].tolist(), ju[keep].tolist()))


def _prufer_tree(n: int, rng) -> list[tuple[int, int]]:
    if n == 2:
        return [(0, 1)]
    seq = rng.integers(0, n, size=n - 2).tolist()
    degree = [1] * n
    for v in seq:
        degree[v] += 1
    leaves = [v for v in range(n) if degree[v] == 1]
    heapq.heapify(leaves)
    edges = []
    for v in seq:
        leaf = heapq.heappop(leaves)
        edges.append((leaf, v))
        degree[v] -= 1
        if degree[v] == 1:
            heapq.heappush(leaves, v)
    edges.append((heapq.heappop(leaves), heapq.heappop(leaves)))
    return edges


def spectral_target(g: Graph) -> float:
    """Mean of the three smallest nonzero Laplacian eigenvalues (fewer if n < 4)."""
    evals = eigendecompose(laplacian(g)).eigenvalues
    nonzero = evals[evals > ZERO_TOL]
    return float(np.mean(nonzero[:3]))


def _structural_labels(g: Graph) -> list[int]:
    deg = degree_vector(g)
    return [
        int(g.num_edges >= g.num_nodes),  # has a cycle
        int(deg.max() >= 4),
        int(diameter(g) >= 4),
    ]


def generate_synthetic(spec: SyntheticSpec | str) -> list[Graph]:
    """Connected random graphs with targets; a pure function of the spec."""
    if isinstance(spec, str):
        spec = parse_generator_spec(spec)
    _check_spec(spec)
    rng = np.random.default_rng(spec.seed)
    graphs = []
    for k in range(spec.count):
        n = spec.n if spec.n_max is None else int(rng.integers(spec.n, spec.n_max + 1))
        blocks = None
        if spec.kind == "tree":
            edges = _prufer_tree(n, rng)
        else:
            if spec.kind == "sbm":
                blocks = rng.permutation(np.r_[np.zeros(n // 2, int), np.ones(n - n // 2, int)])
            for _ in range(spec.max_tries):
                if blocks is None:
                    edges = _er_edges(n, spec.p, rng)
                else:
                    edges = _sbm_edges(blocks, spec.p_in, spec.p_out, rng)
                probe = build_graph(n, edges)
                if is_connected(probe):
                    break
            else:
                raise GeneratorError(
                    f"graph {k}: no connected sample in {spec.max_tries} tries "
                    f"(n={n}); connection probabilities too small"
                )
        g = build_graph(n, edges)
        if blocks is not None:
            shown = rng.random(n) < spec.reveal
            x = np.where(shown, blocks + 1, 0)
        else:
            x = np.minimum(degree_vector(g).astype(np.int64), 7)
        e = None
        if spec.edge_types > 0:
            e = rng.integers(0, spec.edge_types, size=g.num_edges)
        target = spec.resolved_target
        if target == "node":
            y = blocks.tolist()
        elif target == "regression":
            y = spectral_target(g)
        elif target == "multilabel":
            y = _structural_labels(g)
        else:
            y = _structural_labels(g)[0]
        if target == "multilabel":
            y = Target("graph-vector", np.array(y, dtype=np.int64))
        graphs.append(build_graph(n, g.edges, x, e, y))
    return graphs


def load_graphs(source: str, task: str | None = None) -> tuple[list[Graph], DatasetManifest]:
    """A graph file path or a ``gen:`` generator spec."""
    if source.startswith("gen:"):
        spec = parse_generator_spec(source)
        graphs = generate_synthetic(spec)
        m = infer_manifest(graphs, task or spec.task, source=source, seed=spec.seed)
        # vocabularies are fixed by the generator, not by which codes happen to occur
        vocab = 3 if spec.kind == "sbm" else 8
        edge_kind = "categorical" if spec.edge_types > 0 else None
        m.schema = FeatureSchema("categorical", vocab, edge_kind, spec.edge_types, m.schema.num_outputs)
        return graphs, m
    return parse_graph_lines(source, task)


# ---------------------------------------------------------------------------
# spectra cache

CACHE_MAGIC = b"EIGS"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sI")
_RECORD = struct.Struct("<QIIId")


def graph_digest(g: Graph) -> int:
    """FNV-1a 64 over the node count and canonical edge list (u32 little-endian)."""
    payload = struct.pack("<I", g.num_nodes) + g.edges.astype("<u4").tobytes()
    return fnv1a64(payload)


@dataclass(frozen=True)
class CacheRecord:
    digest: int
    num_nodes: int
    diameter: int
    residual: float
    lambdas: np.ndarray
    sigma: np.ndarray

    def distances(self) -> SpectralDistances:
        k = self.lambdas.shape[0]
        return SpectralDistances(self.num_nodes, np.arange(1, k + 1), self.sigma, self.lambdas,
                                 self.diameter)

    def bytes_equal(self, other: "CacheRecord") -> bool:
        return (
            self.digest == other.digest
            and self.num_nodes == other.num_nodes
            and self.diameter == other.diameter
            and self.residual == other.residual
            and self.lambdas.tobytes() == other.lambdas.tobytes()
            and self.sigma.tobytes() == other.sigma.tobytes()
        )


class VerificationError(CacheError):
    pass


def compute_record(g: Graph, tol: float = SOLVER_TOL) -> CacheRecord:
    """Spectrum, verification and sigma for one graph.

    Raises DisconnectedGraphError for a disconnected graph and
    VerificationError when the spectrum fails its checks.
    """
    spec = eigendecompose(laplacian(g), tol)
    report = verify_spectrum(g, spec)
    if not report.passed:
        raise VerificationError(
            f"spectrum failed verification (identity error {report.max_identity_error:.3e}, "
            f"residual {report.max_residual:.3e})"
        )
    sd = sigma_tensor(g, spec)
    return CacheRecord(graph_digest(g), g.num_nodes, sd.diameter, spec.residual_bound,
                       np.array(sd.lambdas), np.array(sd.sigma))


def write_cache(path: str | Path, records: Iterable[CacheRecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION))
        for r in records:
            k = r.lambdas.shape[0]
            if r.sigma.shape != (k, r.num_nodes, r.num_nodes):
                raise CacheError(f"record {r.digest:016x}: sigma shape {r.sigma.shape} inconsistent")
            fh.write(_RECORD.pack(r.digest, r.num_nodes, k, r.diameter, r.residual))
            fh.write(np.ascontiguousarray(r.lambdas, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(r.sigma, dtype="<f8").tobytes())


def read_cache(path: str | Path) -> list[CacheRecord]:
    """All records in file order.

    A file cut short raises CacheTruncatedError carrying every complete
    record before the damage.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CacheTruncatedError(f"{path}: file too short for a cache header", [])
    magic, version = _HEADER.unpack_from(data, 0)
    if magic != CACHE_MAGIC:
        raise CacheError(f"{path}: not a spectra cache (magic {magic!r})")
    if version != CACHE_VERSION:
        raise CacheVersionError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    records: list[CacheRecord] = []
    off = _HEADER.size
    while off < len(data):
        if off + _RECORD.size > len(data):
            raise CacheTruncatedError(
                f"{path}: truncated record header after {len(records)} records", records)
        digest, n, k, diam, resid = _RECORD.unpack_from(data, off)
        body = 8 * (k + k * n * n)
        start = off + _RECORD.size
        if start + body > len(data):
            raise CacheTruncatedError(
                f"{path}: truncated record body after {len(records)} records", records)
        lambdas = np.frombuffer(data, "<f8", k, start).astype(np.float64)
        sigma = np.frombuffer(data, "<f8", k * n * n, start + 8 * k).astype(np.float64)
        sigma = sigma.reshape(k, n, n)
        lambdas.setflags(write=False)
        sigma.setflags(write=False)
        records.append(CacheRecord(digest, n, diam, resid, lambdas, sigma))
        off = start + body
    return records


class SpectraCache:
    """Records indexed by graph digest."""

    def __init__(self, records: Iterable[CacheRecord] = ()):
        self.records: dict[int, CacheRecord] = {}
        for r in records:
            self.records.setdefault(r.digest, r)

    @classmethod
    def load(cls, paths: str | Path | Sequence[str | Path]) -> "SpectraCache":
        if isinstance(paths, (str, Path)):
            paths = [paths]
        records: list[CacheRecord] = []
        for p in paths:
            records.extend(read_cache(p))
        return cls(records)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, g: Graph) -> bool:
        return graph_digest(g) in self.records

    def get(self, g: Graph, verify: bool = False) -> SpectralDistances:
        """Distances for ``g``; a graph with no matching digest is rejected.

        With ``verify`` the spectrum is recomputed, checked, and compared
        bitwise with the cached eigenvalues and sigma.
        """
        d = graph_digest(g)
        rec = self.records.get(d)
        if rec is None or rec.num_nodes != g.num_nodes:
            raise CacheMissError(f"no cached spectrum for graph digest {d:016x}", d)
        if verify:
            fresh = compute_record(g)
            if not fresh.bytes_equal(rec):
                raise VerificationError(f"cached spectrum for digest {d:016x} does not match recomputation")
        return rec.distances()

    def attach(self, graphs: Sequence[Graph], verify: bool = False) -> list[tuple[Graph, SpectralDistances]]:
        """Pair every graph with its distances; names the first missing digest."""
        return [(g, self.get(g, verify)) for g in graphs]


__all__ += ["VerificationError", "graph_record", "DisconnectedGraphError"]
