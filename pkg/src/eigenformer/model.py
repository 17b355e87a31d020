"""Spectrum-aware attention and the layer stack built on it.

Graphs in a batch are sorted by size and grouped into buckets of equal node
count, so each bucket's distance tensors stack into one dense block and
attention never mixes nodes of different graphs. Batch norm sees every node
in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import FeatureSchema, TrainConfig
from .graph import Graph, degree_vector
from .spectral import SpectralDistances

__all__ = [
    "Batch",
    "Bucket",
    "HeadMismatchError",
    "Linear",
    "Embedding",
    "PhiMLP",
    "EigenformerLayer",
    "EigenformerModel",
    "collate",
    "phi_eval",
    "saa_attention",
    "model_forward",
    "TASK_TARGET_KIND",
]

TASK_TARGET_KIND = {
    "graph-regression": ("graph-scalar", "graph-vector"),
    "graph-classification": ("graph-scalar",),
    "multilabel-classification": ("graph-vector",),
    "node-classification": ("node-classes",),
}


class HeadMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# batching


@dataclass
class Bucket:
    """All graphs of one size inside a batch, with stacked spectral data."""

    n: int
    count: int
    node_start: int
    sigma_flat: np.ndarray  # (count, n*n, K)
    lambdas: np.ndarray  # (count*K, 1)
    arc_edge: np.ndarray  # (A,) row into the batch edge-feature array
    arc_alpha: np.ndarray  # (A,) flat index b*n*n + i*n + j
    arc_segment: np.ndarray  # (A,) receiving row b*n + i within the bucket

    @property
    def num_active(self) -> int:
        return self.sigma_flat.shape[2]


@dataclass
class Batch:
    num_graphs: int
    order: np.ndarray  # original position of the graph at each sorted slot
    node_counts: np.ndarray
    node_x: np.ndarray
    edge_x: np.ndarray | None
    log_degree: np.ndarray  # (N, 1)
    node_graph: np.ndarray  # graph slot of each node
    node_offsets: np.ndarray  # first node of each slot
    buckets: list[Bucket]
    target_kind: str | None
    targets: np.ndarray | None

    @property
    def num_nodes(self) -> int:
        return int(self.node_graph.shape[0])


def collate(graphs: Sequence[Graph], sds: Sequence[SpectralDistances]) -> Batch:
    if len(graphs) != len(sds):
        raise ValueError("each graph needs its spectral distances")
    for g, sd in zip(graphs, sds):
        if sd.num_nodes != g.num_nodes:
            raise ValueError(
                f"spectral distances for {sd.num_nodes} nodes given for a "
                f"{g.num_nodes}-node graph"
            )
    order = np.array(
        sorted(range(len(graphs)), key=lambda k: graphs[k].num_nodes), dtype=np.int64
    )
    gs = [graphs[k] for k in order]
    ss = [sds[k] for k in order]
    counts = np.array([g.num_nodes for g in gs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    node_graph = np.repeat(np.arange(len(gs)), counts)

    node_x = np.concatenate([g.node_features for g in gs], axis=0) if gs else np.zeros(0)
    has_edge_x = bool(gs) and gs[0].edge_features is not None
    edge_x = None
    edge_offsets = np.concatenate([[0], np.cumsum([g.num_edges for g in gs])[:-1]]).astype(
        np.int64
    )
    if has_edge_x:
        if any(g.edge_features is None for g in gs):
            raise ValueError("edge features present on some graphs but not others")
        edge_x = np.concatenate([g.edge_features for g in gs], axis=0)

    log_degree = np.concatenate(
        [np.log1p(degree_vector(g).astype(np.float64)) for g in gs]
    ).reshape(-1, 1) if gs else np.zeros((0, 1))

    buckets = []
    start = 0
    while start < len(gs):
        n = gs[start].num_nodes
        stop = start
        while stop < len(gs) and gs[stop].num_nodes == n:
            stop += 1
        members = range(start, stop)
        k = ss[start].num_active
        if any(ss[s].num_active != k for s in members):
            raise ValueError(f"graphs of size {n} disagree on active frequency count")
        sigma_flat = np.stack(
            [ss[s].sigma.reshape(k, n * n).T for s in members]
        ) if k else np.zeros((stop - start, n * n, 0))
        lambdas = np.concatenate([ss[s].lambdas for s in members]).reshape(-1, 1)

        arc_edge, arc_alpha, arc_seg = [], [], []
        for b, s in enumerate(members):
            g = gs[s]
            if not g.num_edges:
                continue
            i, j = g.edges[:, 0], g.edges[:, 1]
            eidx = edge_offsets[s] + np.arange(g.num_edges)
            src = np.concatenate([i, j])
            dst = np.concatenate([j, i])
            arc_edge.append(np.concatenate([eidx, eidx]))
            arc_alpha.append(b * n * n + src * n + dst)
            arc_seg.append(b * n + src)
        cat = lambda parts: (
            np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, dtype=np.int64)
        )
        buckets.append(
            Bucket(n, stop - start, int(offsets[start]), sigma_flat, lambdas,
                   cat(arc_edge), cat(arc_alpha), cat(arc_seg))
        )
        start = stop

    kinds = {g.target.kind for g in gs if g.target is not None}
    targets = None
    target_kind = None
    if kinds:
        if len(kinds) > 1 or any(g.target is None for g in gs):
            raise HeadMismatchError(f"mixed target kinds in one batch: {sorted(kinds)}")
        target_kind = kinds.pop()
        if target_kind == "node-classes":
            targets = np.concatenate([g.target.value for g in gs])
        else:
            targets = np.stack([g.target.value for g in gs])
    return Batch(len(gs), order, counts, node_x, edge_x, log_degree, node_graph,
                 offsets, buckets, target_kind, targets)


# ---------------------------------------------------------------------------
# building blocks


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng, bias: bool = True, zero: bool = False):
        if zero:
            self.weight = ad.parameter(np.zeros((in_dim, out_dim)))
            self.bias = ad.parameter(np.zeros(out_dim)) if bias else None
        else:
            self.weight = ad.parameter(_uniform(rng, in_dim, (in_dim, out_dim)))
            self.bias = ad.parameter(_uniform(rng, in_dim, out_dim)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class Embedding:
    def __init__(self, vocab: int, dim: int, rng):
        self.table = ad.parameter(rng.normal(size=(vocab, dim)))

    def __call__(self, codes) -> Tensor:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size and (codes.min() < 0 or codes.max() >= self.table.shape[0]):
            raise ValueError(
                f"categorical code outside vocabulary of size {self.table.shape[0]}"
            )
        return ad.take(self.table, codes)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.table", self.table


def _embedder(kind: str, size: int, dim: int, rng):
    return Embedding(size, dim, rng) if kind == "categorical" else Linear(size, dim, rng)


class BatchNorm:
    def __init__(self, dim: int):
        self.gamma = ad.parameter(np.ones(dim))
        self.beta = ad.parameter(np.zeros(dim))
        self.state = ad.BatchNormState(dim)

    def __call__(self, x, train: bool) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.state, train)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.state, "running_mean"
        yield f"{prefix}.running_var", self.state, "running_var"


class PhiMLP:
    """Frequency importance: eigenvalue -> hidden ReLU layer -> one weight per head.

    The output layer starts at zero so a fresh model attends uniformly.
    """

    def __init__(self, hidden: int, out: int, rng):
        self.hidden = Linear(1, hidden, rng)
        self.out = Linear(hidden, out, rng, zero=True)

    @property
    def out_dim(self) -> int:
        return self.out.weight.shape[1]

    def __call__(self, lambdas) -> Tensor:
        return self.out(ad.relu(self.hidden(lambdas)))

    def named_parameters(self, prefix: str):
        yield from self.hidden.named_parameters(f"{prefix}.hidden")
        yield from self.out.named_parameters(f"{prefix}.out")


def phi_eval(phi: PhiMLP, lambdas) -> Tensor:
    """Importance of each active frequency, shape ``(K, out_dim)``."""
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1, 1)
    return phi(Tensor(lam))


def _bucket_attention(sigma_flat, importances: Tensor, n: int) -> Tensor:
    """Row-softmaxed attention for a stack of same-size graphs.

    ``sigma_flat`` is ``(B, n*n, K)``; ``importances`` is ``(B, K, H)``.
    Returns ``(B, H, n, n)``.
    """
    count, _, k = sigma_flat.shape
    h = importances.shape[-1]
    if importances.shape[:2] != (count, k):
        raise ValueError(
            f"importances of shape {importances.shape} do not match "
            f"{k} active frequencies for {count} graphs"
        )
    logits = -ad.matmul(Tensor(sigma_flat), importances)
    logits = logits.reshape(count, n, n, h).transpose(0, 3, 1, 2)
    return ad.softmax(logits, axis=-1)


def saa_attention(
    sd: SpectralDistances,
    importances,
    dropout_rate: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Attention of one graph from its distances and frequency importances.

    ``importances`` is ``(K, H)`` as returned by :func:`phi_eval`; the result
    is ``(H, N, N)``.
    """
    imp = ad.tensor(importances)
    if imp.ndim != 2 or imp.shape[0] != sd.num_active:
        raise ValueError(
            f"importances of shape {imp.shape} do not match {sd.num_active} active frequencies"
        )
    n, k = sd.num_nodes, sd.num_active
    sigma_flat = sd.sigma.reshape(k, n * n).T[None] if k else np.zeros((1, n * n, 0))
    alpha = _bucket_attention(sigma_flat, imp.reshape(1, k, imp.shape[1]), n)
    alpha = ad.dropout(alpha, dropout_rate, rng, train)
    return alpha.reshape(imp.shape[1], n, n)


class EigenformerLayer:
    def __init__(self, config: TrainConfig, edge_dim: int, rng):
        d, h = config.hidden_dim, config.heads
        self.d = d
        self.heads = h
        self.head_mode = config.head_mode
        self.edge_dim = edge_dim
        self.attention_dropout = config.attention_dropout
        self.ffn_dropout = config.dropout
        out = h if config.head_mode == "per-head" else 1
        self.phi = PhiMLP(config.phi_hidden_dim, out, rng)
        self.node_proj = Linear(d, d, rng)
        self.edge_proj = Linear(edge_dim, d, rng) if edge_dim else None
        self.theta1 = ad.parameter(np.ones(d))
        self.theta2 = ad.parameter(np.zeros(d))
        self.bn1 = BatchNorm(d)
        self.bn2 = BatchNorm(d)
        self.ffn1 = Linear(d, 2 * d, rng)
        # no bias: a per-feature constant here is removed by bn2
        self.ffn2 = Linear(2 * d, d, rng, bias=False)

    def _propagate(self, bucket: Bucket, values: Tensor, edges: Tensor | None,
                   train: bool, rng, keep: list | None) -> Tensor:
        n, count, k = bucket.n, bucket.count, bucket.num_active
        rows = n * count
        imp = self.phi(Tensor(bucket.lambdas)).reshape(count, k, self.phi.out_dim)
        alpha = _bucket_attention(bucket.sigma_flat, imp, n)
        alpha = ad.dropout(alpha, self.attention_dropout, rng, train)
        if keep is not None:
            keep.append(alpha.value)
        hout = self.phi.out_dim
        dh = self.d // self.heads

        v = ad.take(values, np.arange(bucket.node_start, bucket.node_start + rows))
        if hout == 1:
            node_part = ad.matmul(alpha.reshape(count, n, n), v.reshape(count, n, self.d))
        else:
            vh = v.reshape(count, n, self.heads, dh).transpose(0, 2, 1, 3)
            node_part = ad.matmul(alpha, vh).transpose(0, 2, 1, 3)
        out = node_part.reshape(rows, self.d)

        if self.edge_proj is None:
            return out
        # sum_j alpha_ij (W e_ij + b): edge features only on arcs, bias on every j
        parts = []
        if bucket.arc_alpha.size:
            a_arc = ad.take(alpha.transpose(0, 2, 3, 1).reshape(count * n * n, hout),
                            bucket.arc_alpha)
            e_arc = ad.take(edges, bucket.arc_edge)
            weighted = a_arc.reshape(-1, hout, 1) * e_arc.reshape(-1, 1, self.edge_dim)
            parts.append(ad.segment_sum(weighted, bucket.arc_segment, rows))
        else:
            parts.append(Tensor(np.zeros((rows, hout, self.edge_dim))))
        parts.append(alpha.sum(axis=-1).transpose(0, 2, 1).reshape(rows, hout, 1))
        agg = ad.concat(parts, axis=-1)
        w = ad.concat([self.edge_proj.weight, self.edge_proj.bias.reshape(1, self.d)], axis=0)
        c = self.edge_dim + 1
        if hout == 1:
            edge_part = ad.matmul(agg.reshape(rows, c), w)
        else:
            wh = w.reshape(c, self.heads, dh).transpose(1, 0, 2)
            edge_part = ad.matmul(agg.transpose(1, 0, 2), wh).transpose(1, 0, 2)
            edge_part = edge_part.reshape(rows, self.d)
        return out + edge_part

    def __call__(self, x: Tensor, batch: Batch, edges: Tensor | None, train: bool,
                 rng=None, keep: list | None = None) -> Tensor:
        values = self.node_proj(x)
        pieces = [self._propagate(b, values, edges, train, rng, keep) for b in batch.buckets]
        xhat = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
        logdeg = Tensor(batch.log_degree)
        xt = xhat * self.theta1 + (logdeg * xhat) * self.theta2
        x1 = self.bn1(x + xt, train)
        hidden = ad.dropout(ad.relu(self.ffn1(x1)), self.ffn_dropout, rng, train)
        return self.bn2(x1 + self.ffn2(hidden), train)

    def named_parameters(self, prefix: str):
        yield from self.phi.named_parameters(f"{prefix}.phi")
        yield from self.node_proj.named_parameters(f"{prefix}.node_proj")
        if self.edge_proj is not None:
            yield from self.edge_proj.named_parameters(f"{prefix}.edge_proj")
        yield f"{prefix}.theta1", self.theta1
        yield f"{prefix}.theta2", self.theta2
        yield from self.bn1.named_parameters(f"{prefix}.bn1")
        yield from self.bn2.named_parameters(f"{prefix}.bn2")
        yield from self.ffn1.named_parameters(f"{prefix}.ffn1")
        yield from self.ffn2.named_parameters(f"{prefix}.ffn2")

    def named_buffers(self, prefix: str):
        yield from self.bn1.named_buffers(f"{prefix}.bn1")
        yield from self.bn2.named_buffers(f"{prefix}.bn2")


class EigenformerModel:
    def __init__(self, config: TrainConfig, schema: FeatureSchema, seed: int | None = None):
        config.check()
        self.config = config
        self.schema = schema
        rng = np.random.default_rng(config.seed if seed is None else seed)
        d = config.hidden_dim
        self.node_embed = _embedder(schema.node_kind, schema.node_size, d, rng)
        self.edge_dim = 0
        self.edge_embed = None
        if schema.edge_kind is not None:
            self.edge_dim = config.edge_dim or d
            self.edge_embed = _embedder(schema.edge_kind, schema.edge_size, self.edge_dim, rng)
        self.layers = [EigenformerLayer(config, self.edge_dim, rng) for _ in range(config.layers)]
        self.head = Linear(d, schema.num_outputs, rng)

    @property
    def task(self) -> str:
        return self.config.task

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.node_embed.named_parameters("node_embed"))
        if self.edge_embed is not None:
            out += self.edge_embed.named_parameters("edge_embed")
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"layers.{i}")
        out += self.head.named_parameters("head")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            yield from layer.named_buffers(f"layers.{i}")

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def check_targets(self, batch: Batch) -> None:
        if batch.target_kind is None:
            return
        allowed = TASK_TARGET_KIND[self.task]
        if batch.target_kind not in allowed:
            raise HeadMismatchError(
                f"task {self.task!r} cannot use {batch.target_kind!r} targets"
            )

    def forward(self, batch: Batch, train: bool = False, rng=None,
                return_attention: bool = False):
        """Predictions for a collated batch, in the batch's sorted graph order.

        Node tasks give ``(N, C)`` logits; graph tasks give ``(G, outputs)``.
        With ``return_attention`` also returns, per layer, the list of
        per-bucket attention arrays ``(B, H, n, n)``.
        """
        self.check_targets(batch)
        x = self.node_embed(batch.node_x)
        edges = None
        if self.edge_embed is not None:
            edges = self.edge_embed(batch.edge_x)
        attention = []
        for layer in self.layers:
            keep = [] if return_attention else None
            x = layer(x, batch, edges, train, rng, keep)
            attention.append(keep)
        if self.task == "node-classification":
            out = self.head(x)
        else:
            seg = ad.segment_sum if self.config.pooling == "sum" else ad.segment_mean
            out = self.head(seg(x, batch.node_graph, batch.num_graphs))
        return (out, attention) if return_attention else out


def model_forward(m: EigenformerModel, g: Graph, sd: SpectralDistances,
                  train: bool = False, rng=None) -> Tensor:
    """Prediction for a single graph."""
    return m.forward(collate([g], [sd]), train, rng)
