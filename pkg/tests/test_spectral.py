import math

import numpy as np
import pytest
from hypothesis import given, settings

from eigenformer.graph import DisconnectedGraphError, build_graph, permute
from eigenformer.spectral import (
    EigenSolverError,
    Spectrum,
    SymmetricMatrix,
    eigendecompose,
    laplacian,
    sigma_tensor,
    spectral_distances,
    verify_spectrum,
)

from conftest import complete_graph, connected_graphs, cycle_graph, path_graph, random_connected


class TestLaplacian:
    def test_edge(self):
        np.testing.assert_array_equal(laplacian(path_graph(2)).entries, [[1, -1], [-1, 1]])

    def test_path3(self):
        np.testing.assert_array_equal(
            laplacian(path_graph(3)).entries, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]]
        )

    def test_single_node(self):
        np.testing.assert_array_equal(laplacian(build_graph(1, [])).entries, [[0]])

    @given(connected_graphs())
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_zero_exactly(self, g):
        assert np.all(laplacian(g).entries.sum(axis=1) == 0)

    def test_symmetric_matrix_reads_upper_triangle(self):
        m = SymmetricMatrix([[1.0, 2.0], [99.0, 3.0]])
        np.testing.assert_array_equal(m.entries, [[1, 2], [2, 3]])


class TestEigendecompose:
    def test_two_by_two(self):
        s = eigendecompose(np.array([[1.0, -1.0], [-1.0, 1.0]]))
        np.testing.assert_allclose(s.eigenvalues, [0.0, 2.0], atol=1e-14)
        r = 1 / math.sqrt(2)
        np.testing.assert_allclose(np.abs(s.eigenvectors), [[r, r], [r, r]], atol=1e-14)
        assert s.eigenvectors[0, 1] * s.eigenvectors[1, 1] < 0

    def test_path3(self):
        s = eigendecompose(laplacian(path_graph(3)))
        np.testing.assert_allclose(s.eigenvalues, [0.0, 1.0, 3.0], atol=1e-14)

    def test_zero_matrix(self):
        s = eigendecompose(np.zeros((3, 3)), tol=1e-12)
        np.testing.assert_array_equal(s.eigenvalues, [0, 0, 0])
        np.testing.assert_allclose(s.eigenvectors.T @ s.eigenvectors, np.eye(3))

    def test_known_spectra(self):
        """Closed forms: C4 (0,2,2,4), K4 (0,4,4,4), star K1,3 (0,1,1,4), path P_n 2-2cos(k pi/n)."""
        cases = [
            (cycle_graph(4), [0, 2, 2, 4]),
            (complete_graph(4), [0, 4, 4, 4]),
            (build_graph(4, [(0, 1), (0, 2), (0, 3)]), [0, 1, 1, 4]),
            (path_graph(7), [2 - 2 * math.cos(k * math.pi / 7) for k in range(7)]),
        ]
        for g, expected in cases:
            s = eigendecompose(laplacian(g))
            np.testing.assert_allclose(s.eigenvalues, expected, atol=1e-12)

    def test_matches_lapack_on_random_symmetric(self, rng):
        for n in (1, 2, 5, 12, 24):
            a = rng.normal(size=(n, n))
            a = a + a.T
            s = eigendecompose(a)
            np.testing.assert_allclose(s.eigenvalues, np.linalg.eigvalsh(a), atol=1e-11)
            np.testing.assert_allclose(s.eigenvectors.T @ s.eigenvectors, np.eye(n), atol=1e-12)
            assert s.residual_bound <= 1e-10 * max(np.linalg.norm(a), 1)

    def test_ascending_and_zero_first(self, rng):
        for _ in range(10):
            g = random_connected(rng, 10)
            s = eigendecompose(laplacian(g))
            assert np.all(np.diff(s.eigenvalues) >= 0)
            assert abs(s.eigenvalues[0]) <= 1e-10

    def test_sweep_cap(self):
        a = np.array([[2.0, 1.0], [1.0, 3.0]])
        with pytest.raises(EigenSolverError) as info:
            eigendecompose(a, max_sweeps=0)
        assert info.value.off_norm > 0

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError):
            eigendecompose(np.zeros((2, 3)))


class TestSigma:
    def test_edge_graph(self):
        _, sd = spectral_distances(path_graph(2))
        np.testing.assert_allclose(sd.lambdas, [2.0])
        assert abs(sd.sigma[0, 0, 1] - 1.0) <= 1e-12

    def test_path3_values(self):
        _, sd = spectral_distances(path_graph(3))
        assert sd.diameter == 2
        np.testing.assert_allclose(sd.lambdas, [1.0, 3.0], atol=1e-14)
        assert abs(sd.sigma[0, 0, 1] - 0.5) <= 1e-10
        assert abs(sd.sigma[0, 0, 2] - 1.0) <= 1e-10
        assert abs(sd.sigma[0, 1, 2] - 0.5) <= 1e-10
        assert abs(sd.sigma[1, 0, 2]) <= 1e-10

    @given(connected_graphs(min_nodes=2, max_nodes=12))
    @settings(max_examples=60, deadline=None)
    def test_bound_symmetry_diagonal(self, g):
        _, sd = spectral_distances(g)
        assert sd.num_active == g.num_nodes - 1
        assert sd.sigma.min() >= 0.0
        assert sd.sigma.max() <= 1.0 + 1e-9
        np.testing.assert_array_equal(sd.sigma, sd.sigma.transpose(0, 2, 1))
        idx = np.arange(g.num_nodes)
        assert np.all(sd.sigma[:, idx, idx] == 0)

    def test_sign_flip_bitwise_invariant(self, rng):
        g = random_connected(rng, 9)
        s = eigendecompose(laplacian(g))
        flips = np.where(rng.random(9) < 0.5, -1.0, 1.0)
        t = Spectrum(s.eigenvalues, s.eigenvectors * flips, s.residual_bound)
        assert sigma_tensor(g, s).sigma.tobytes() == sigma_tensor(g, t).sigma.tobytes()

    def test_permutation_consistency_on_simple_spectrum(self, rng):
        checked = 0
        while checked < 10:
            g = random_connected(rng, int(rng.integers(5, 12)))
            s = eigendecompose(laplacian(g))
            if np.min(np.diff(s.eigenvalues)) <= 1e-6:
                continue
            p = rng.permutation(g.num_nodes)
            a = spectral_distances(g)[1].sigma
            b = spectral_distances(permute(g, p))[1].sigma
            np.testing.assert_allclose(b[:, p][:, :, p], a, atol=1e-9)
            checked += 1

    def test_disconnected_rejected(self):
        g = build_graph(4, [(0, 1), (2, 3)])
        with pytest.raises(DisconnectedGraphError):
            sigma_tensor(g, eigendecompose(laplacian(g)), diam=1)

    def test_single_node_has_no_active_frequency(self):
        _, sd = spectral_distances(build_graph(1, []))
        assert sd.num_active == 0 and sd.sigma.shape == (0, 1, 1)


class TestVerify:
    def test_edge_graph_identity_exact(self):
        g = path_graph(2)
        rep = verify_spectrum(g, eigendecompose(laplacian(g)))
        assert rep.passed
        assert rep.identity_errors[1] <= 1e-14

    def test_zero_mode_has_zero_edge_sum(self, rng):
        g = random_connected(rng, 8)
        rep = verify_spectrum(g, eigendecompose(laplacian(g)))
        assert rep.identity_errors[0] <= 1e-12

    def test_random_ten_node_graphs(self, rng):
        for _ in range(20):
            g = random_connected(rng, 10)
            rep = verify_spectrum(g, eigendecompose(laplacian(g)))
            assert rep.passed and rep.max_identity_error < 1e-8

    def test_corrupted_spectrum_fails(self, rng):
        g = random_connected(rng, 8)
        s = eigendecompose(laplacian(g))
        bad = Spectrum(s.eigenvalues + 1e-4, s.eigenvectors, s.residual_bound)
        assert not verify_spectrum(g, bad).passed
