"""Laplacian spectra and the pairwise spectral distances fed to attention.

The eigensolver is a cyclic Jacobi method on dense float64 matrices. It is
slow compared with LAPACK but unconditionally stable for symmetric input and
easy to certify, which is what matters for the small graphs handled here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import DisconnectedGraphError, Graph, degree_vector, diameter

__all__ = [
    "EigenSolverError",
    "SymmetricMatrix",
    "Spectrum",
    "SpectralDistances",
    "SpectrumReport",
    "laplacian",
    "eigendecompose",
    "sigma_tensor",
    "spectral_distances",
    "verify_spectrum",
    "SOLVER_TOL",
    "ZERO_TOL",
    "MAX_SWEEPS",
]

SOLVER_TOL = 1e-12
ZERO_TOL = 1e-8
MAX_SWEEPS = 100


class EigenSolverError(RuntimeError):
    def __init__(self, message: str, off_norm: float):
        super().__init__(message)
        self.off_norm = off_norm


class SymmetricMatrix:
    """Dense symmetric float64 matrix. Only the upper triangle of the input is read."""

    __slots__ = ("entries",)

    def __init__(self, entries):
        a = np.array(entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        upper = np.triu(a)
        a = upper + np.triu(a, 1).T
        a.setflags(write=False)
        self.entries = a

    @property
    def order(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns aligned with eigenvalues
    residual_bound: float
    sweeps: int = 0


@dataclass(frozen=True)
class SpectralDistances:
    """Per-frequency pairwise distances for one connected graph.

    ``sigma[k, i, j]`` belongs to eigenvalue ``lambdas[k]``, which is the
    eigenpair ``active_frequencies[k]`` of the full ascending spectrum.
    """

    num_nodes: int
    active_frequencies: np.ndarray
    sigma: np.ndarray
    lambdas: np.ndarray
    diameter: int

    @property
    def num_active(self) -> int:
        return int(self.lambdas.shape[0])


def laplacian(g: Graph) -> SymmetricMatrix:
    n = g.num_nodes
    lap = np.zeros((n, n), dtype=np.float64)
    lap[np.arange(n), np.arange(n)] = degree_vector(g)
    if g.num_edges:
        i, j = g.edges[:, 0], g.edges[:, 1]
        lap[i, j] = -1.0
        lap[j, i] = -1.0
    return SymmetricMatrix(lap)


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.linalg.norm(off))


def eigendecompose(
    m: SymmetricMatrix | np.ndarray,
    tol: float = SOLVER_TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> Spectrum:
    """Full eigendecomposition by cyclic Jacobi rotations.

    Sweeps over all ``(p, q)`` pairs until the off-diagonal Frobenius norm is
    at most ``tol * ||m||_F``. Eigenpairs come back in ascending order.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not isinstance(m, SymmetricMatrix):
        m = SymmetricMatrix(m)
    a = np.array(m.entries)
    n = a.shape[0]
    v = np.eye(n)
    target = tol * float(np.linalg.norm(m.entries))

    sweeps = 0
    off = _off_norm(a)
    while off > target:
        if sweeps >= max_sweeps:
            raise EigenSolverError(
                f"Jacobi did not converge in {max_sweeps} sweeps "
                f"(off-diagonal norm {off:.3e}, target {target:.3e})",
                off,
            )
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = float(a[p, q])
                if apq == 0.0:
                    continue
                app, aqq = float(a[p, p]), float(a[q, q])
                theta = (aqq - app) / (2.0 * apq)
                if abs(theta) > 1e150:
                    # theta**2 would overflow; use t ~ 1/(2 theta)
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                    if theta < 0:
                        t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                a[p, :] = a[:, p]
                a[q, :] = a[:, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0

                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        sweeps += 1
        off = _off_norm(a)

    evals = np.diag(a).copy()
    order = np.argsort(evals, kind="stable")
    evals = evals[order]
    evecs = v[:, order]
    resid = m.entries @ evecs - evecs * evals
    bound = float(np.max(np.linalg.norm(resid, axis=0))) if n else 0.0
    evals.setflags(write=False)
    evecs.setflags(write=False)
    return Spectrum(evals, evecs, bound, sweeps)


def sigma_tensor(
    g: Graph, s: Spectrum, zero_tol: float = ZERO_TOL, diam: int | None = None
) -> SpectralDistances:
    """Relative node distances per nonzero Laplacian frequency.

    Adjacent pairs: ``(u_k[i] - u_k[j])**2 / lambda_k``. Non-adjacent pairs
    get an extra division by the graph diameter, which keeps every value in
    ``[0, 1]``. The zero frequency is dropped.
    """
    if zero_tol <= 0:
        raise ValueError("zero_tol must be positive")
    n = g.num_nodes
    zero = np.flatnonzero(np.abs(s.eigenvalues) <= zero_tol)
    if zero.size != 1:
        raise DisconnectedGraphError(
            f"expected exactly one zero eigenvalue, found {zero.size}; "
            "graph is disconnected"
        )
    if diam is None:
        diam = diameter(g)
    active = np.flatnonzero(s.eigenvalues > zero_tol)
    lambdas = s.eigenvalues[active].copy()

    u = s.eigenvectors[:, active].T  # (k, n)
    diff2 = (u[:, :, None] - u[:, None, :]) ** 2
    scale = np.full((n, n), float(diam))
    if g.num_edges:
        scale[g.edges[:, 0], g.edges[:, 1]] = 1.0
        scale[g.edges[:, 1], g.edges[:, 0]] = 1.0
    sigma = diff2 / (scale[None, :, :] * lambdas[:, None, None])
    idx = np.arange(n)
    sigma[:, idx, idx] = 0.0

    for arr in (active, sigma, lambdas):
        arr.setflags(write=False)
    return SpectralDistances(n, active, sigma, lambdas, int(diam))


def spectral_distances(
    g: Graph, tol: float = SOLVER_TOL, zero_tol: float = ZERO_TOL
) -> tuple[Spectrum, SpectralDistances]:
    """Convenience: Laplacian, spectrum and sigma tensor in one call."""
    spec = eigendecompose(laplacian(g), tol)
    return spec, sigma_tensor(g, spec, zero_tol)


@dataclass(frozen=True)
class SpectrumReport:
    identity_errors: np.ndarray
    residuals: np.ndarray
    orthonormality_error: float
    laplacian_norm: float
    passed: bool

    @property
    def max_identity_error(self) -> float:
        return float(self.identity_errors.max(initial=0.0))

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max(initial=0.0))


def verify_spectrum(
    g: Graph,
    s: Spectrum,
    identity_tol: float = 1e-8,
    residual_tol: float = 1e-8,
    ortho_tol: float = 1e-8,
) -> SpectrumReport:
    """Check each eigenpair against the edge-sum form of its eigenvalue.

    ``lambda_k`` must equal the sum over edges of squared eigenvector
    differences. Residuals are judged relative to ``||L||_F``.
    """
    lap = laplacian(g).entries
    u = s.eigenvectors
    if g.num_edges:
        d = u[g.edges[:, 0], :] - u[g.edges[:, 1], :]
        edge_sums = np.sum(d * d, axis=0)
    else:
        edge_sums = np.zeros(u.shape[1])
    identity = np.abs(s.eigenvalues - edge_sums)
    residuals = np.linalg.norm(lap @ u - u * s.eigenvalues, axis=0)
    n = u.shape[1]
    ortho = float(np.max(np.abs(u.T @ u - np.eye(n)))) if n else 0.0
    lnorm = float(np.linalg.norm(lap))
    passed = bool(
        np.all(identity <= identity_tol)
        and np.all(residuals <= residual_tol * max(lnorm, 1.0))
        and ortho <= ortho_tol
    )
    return SpectrumReport(identity, residuals, ortho, lnorm, passed)
