"""Tabular dumps of learned frequency weights, attention maps and distance profiles.

All writers format floats with 17 significant digits so reruns on identical
inputs give identical bytes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .graph import Graph, adjacency_matrix
from .model import EigenformerModel, collate, phi_eval
from .spectral import SpectralDistances

__all__ = [
    "phi_table",
    "attention_maps",
    "SigmaProfile",
    "sigma_profile",
    "lowest_frequency_contrast",
    "write_phi_csv",
    "write_attention_csvs",
    "write_sigma_profile_csv",
]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def phi_table(model: EigenformerModel, lambdas: np.ndarray) -> np.ndarray:
    """Frequency importance per layer, shape ``(layers, K, outputs)``."""
    with ad.no_grad():
        return np.stack([phi_eval(layer.phi, lambdas).value for layer in model.layers])


def attention_maps(model: EigenformerModel, g: Graph, sd: SpectralDistances) -> list[np.ndarray]:
    """Eval-mode attention of one graph, one ``(H, n, n)`` array per layer."""
    with ad.no_grad():
        _, att = model.forward(collate([g], [sd]), train=False, return_attention=True)
    return [layer[0][0] for layer in att]


@dataclass(frozen=True)
class SigmaProfile:
    """Mean distance per active-frequency rank, split by adjacency."""

    rank: np.ndarray
    mean_lambda: np.ndarray
    adjacent_mean: np.ndarray
    nonadjacent_mean: np.ndarray
    adjacent_count: np.ndarray
    nonadjacent_count: np.ndarray


def sigma_profile(graphs: Sequence[Graph], sds: Sequence[SpectralDistances]) -> SigmaProfile:
    """Aggregate over a dataset; rank 0 is each graph's lowest nonzero frequency.

    Diagonal entries are excluded. A rank with no pairs of one kind reports NaN.
    """
    kmax = max((sd.num_active for sd in sds), default=0)
    lam_sum = np.zeros(kmax)
    lam_cnt = np.zeros(kmax)
    adj_sum = np.zeros(kmax)
    adj_cnt = np.zeros(kmax)
    non_sum = np.zeros(kmax)
    non_cnt = np.zeros(kmax)
    for g, sd in zip(graphs, sds):
        n, k = sd.num_nodes, sd.num_active
        adj = adjacency_matrix(g).astype(bool)
        non = ~adj & ~np.eye(n, dtype=bool)
        lam_sum[:k] += sd.lambdas
        lam_cnt[:k] += 1
        adj_sum[:k] += sd.sigma[:, adj].sum(axis=1)
        adj_cnt[:k] += adj.sum()
        non_sum[:k] += sd.sigma[:, non].sum(axis=1)
        non_cnt[:k] += non.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        return SigmaProfile(
            np.arange(kmax),
            lam_sum / lam_cnt,
            np.where(adj_cnt > 0, adj_sum / adj_cnt, np.nan),
            np.where(non_cnt > 0, non_sum / non_cnt, np.nan),
            adj_cnt.astype(np.int64),
            non_cnt.astype(np.int64),
        )


def lowest_frequency_contrast(graphs: Sequence[Graph], sds: Sequence[SpectralDistances]) -> tuple[float, float]:
    """(adjacent mean, non-adjacent mean) of sigma at each graph's lowest active frequency."""
    p = sigma_profile(graphs, sds)
    if p.rank.size == 0:
        raise ValueError("no active frequencies in the dataset")
    return float(p.adjacent_mean[0]), float(p.nonadjacent_mean[0])


def write_phi_csv(path: str | Path, model: EigenformerModel, lambdas: np.ndarray) -> None:
    table = phi_table(model, lambdas)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "frequency", "lambda"] + [f"phi_{h}" for h in range(table.shape[2])])
        for layer in range(table.shape[0]):
            for k, lam in enumerate(np.asarray(lambdas).reshape(-1)):
                w.writerow([layer, k, _fmt(lam)] + [_fmt(v) for v in table[layer, k]])


def write_attention_csvs(out_dir: str | Path, model: EigenformerModel, g: Graph,
                         sd: SpectralDistances) -> list[Path]:
    """One file per layer with rows ``head, row, col_0 .. col_{n-1}``."""
    out_dir = Path(out_dir)
    paths = []
    for layer, alpha in enumerate(attention_maps(model, g, sd)):
        path = out_dir / f"attention_layer{layer}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["head", "row"] + [f"col_{j}" for j in range(alpha.shape[-1])])
            for h in range(alpha.shape[0]):
                for i in range(alpha.shape[1]):
                    w.writerow([h, i] + [_fmt(v) for v in alpha[h, i]])
        paths.append(path)
    return paths


def write_sigma_profile_csv(path: str | Path, graphs: Sequence[Graph],
                            sds: Sequence[SpectralDistances]) -> SigmaProfile:
    p = sigma_profile(graphs, sds)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "mean_lambda", "adjacent_mean_sigma", "nonadjacent_mean_sigma",
                    "adjacent_pairs", "nonadjacent_pairs"])
        for k in range(p.rank.size):
            w.writerow([k, _fmt(p.mean_lambda[k]), _fmt(p.adjacent_mean[k]),
                        _fmt(p.nonadjacent_mean[k]), p.adjacent_count[k], p.nonadjacent_count[k]])
    return p
