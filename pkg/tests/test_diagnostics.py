import csv

import numpy as np

from eigenformer.config import FeatureSchema, TrainConfig
from eigenformer.data import generate_synthetic
from eigenformer.diagnostics import (
    attention_maps,
    lowest_frequency_contrast,
    phi_table,
    sigma_profile,
    write_attention_csvs,
    write_phi_csv,
    write_sigma_profile_csv,
)
from eigenformer.graph import adjacency_matrix
from eigenformer.model import EigenformerModel
from eigenformer.spectral import spectral_distances

SCHEMA = FeatureSchema("categorical", 3, None, 0, 2)


def _sbm(count=6, n=10):
    graphs = generate_synthetic(f"gen:sbm:count={count},n={n},seed=3")
    return graphs, [spectral_distances(g)[1] for g in graphs]


def _model(**kw):
    return EigenformerModel(TrainConfig(task="node-classification", layers=2, heads=2, hidden_dim=8,
                                        phi_hidden_dim=8, **kw), SCHEMA)


def test_untrained_model_phi_zero_and_uniform_attention():
    graphs, sds = _sbm()
    model = _model()
    assert np.all(phi_table(model, sds[0].lambdas) == 0)
    for alpha in attention_maps(model, graphs[0], sds[0]):
        assert np.all(alpha == 1.0 / graphs[0].num_nodes)


def test_attention_csv_rows_sum_to_one(tmp_path):
    graphs, sds = _sbm()
    model = _model(head_mode="per-head")
    for _, p in model.named_parameters():
        p.value = p.value + np.random.default_rng(0).normal(size=p.shape)
    paths = write_attention_csvs(tmp_path, model, graphs[0], sds[0])
    assert len(paths) == 2
    for path in paths:
        rows = list(csv.reader(open(path)))[1:]
        assert len(rows) == 2 * graphs[0].num_nodes
        for row in rows:
            assert abs(sum(float(v) for v in row[2:]) - 1.0) <= 1e-9


def test_profile_matches_brute_force():
    graphs, sds = _sbm(count=4)
    prof = sigma_profile(graphs, sds)
    for k in (0, 3):
        adj, non = [], []
        for g, sd in zip(graphs, sds):
            a = adjacency_matrix(g)
            for i in range(g.num_nodes):
                for j in range(g.num_nodes):
                    if i != j:
                        (adj if a[i, j] else non).append(sd.sigma[k, i, j])
        assert abs(prof.adjacent_mean[k] - np.mean(adj)) < 1e-12
        assert abs(prof.nonadjacent_mean[k] - np.mean(non)) < 1e-12


def test_lowest_frequency_adjacent_below_nonadjacent():
    graphs, sds = _sbm(count=16, n=20)
    adj, non = lowest_frequency_contrast(graphs, sds)
    assert adj < non


def test_outputs_byte_stable(tmp_path):
    graphs, sds = _sbm()
    model = _model()
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        write_phi_csv(tmp_path / d / "phi.csv", model, sds[1].lambdas)
        write_attention_csvs(tmp_path / d, model, graphs[1], sds[1])
        write_sigma_profile_csv(tmp_path / d / "s.csv", graphs, sds)
    for name in ("phi.csv", "attention_layer0.csv", "attention_layer1.csv", "s.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
