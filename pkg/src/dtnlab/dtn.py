"""Local Dirichlet-to-Neumann matrices on Sigma and their H^{1/2} -> H^{-1/2} norm."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fem import EigenvalueError, system, stiffness_matrix
from .geometry import Potential
from .mesh import Mesh

LIFTS = ("harmonic", "solution", "hat")


@dataclass(eq=False)
class TraceBasis:
    """Hat functions of the mesh nodes strictly inside Sigma, extended by zero.

    ``mass`` and ``laplace`` are the 1D mass and Laplace-Beltrami matrices of
    these hats along Sigma (zero endpoint values on an arc, periodic on a
    closed curve).  ``eigvecs`` are mass-orthonormal.
    """

    mesh: Mesh
    nodes: np.ndarray
    arclength: np.ndarray
    closed: bool
    mass: np.ndarray
    laplace: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    boundary_rows: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def weights(self) -> np.ndarray:
        return (1.0 + self.eigvals) ** 0.25

    @property
    def points(self) -> np.ndarray:
        return self.mesh.nodes[self.nodes]

    def sobolev_norm(self, coeffs: np.ndarray, order: float = 0.5) -> float:
        """Spectral H^order norm of the trace with nodal values ``coeffs``."""
        hat = self.eigvecs.T @ (self.mass @ coeffs)
        return float(np.sqrt(np.sum((1.0 + self.eigvals) ** order * np.abs(hat) ** 2)))


def _element_lengths(s: np.ndarray, total: float, closed: bool) -> np.ndarray:
    if closed:
        return np.diff(np.concatenate([s, [s[0] + total]]))
    return np.diff(np.concatenate([[0.0], s, [total]]))


def trace_basis(mesh: Mesh) -> TraceBasis:
    """Trace basis for the Sigma nodes tagged on an Omega mesh (cached per mesh)."""
    cache = mesh.__dict__.setdefault("_fem_cache", {})
    if "trace_basis" in cache:
        return cache["trace_basis"]
    if mesh.partition is None or len(mesh.sigma_nodes) == 0:
        raise ValueError("mesh has no Sigma nodes; build it on Omega (extension=False or Mesh.omega())")
    part = mesh.partition
    s = np.asarray(mesh.sigma_coords, dtype=float)
    closed = bool(part.sigma_closed)
    lengths = _element_lengths(s, part.sigma_length, closed)
    m = len(s)
    mass = np.zeros((m, m))
    lap = np.zeros((m, m))
    # element e joins local nodes (e-1, e) on an arc and (e, e+1 mod m) on a loop
    for e, ell in enumerate(lengths):
        pair = [(e, (e + 1) % m)] if closed else [(e - 1, e)]
        for a, b in pair:
            ends = [i for i in (a, b) if 0 <= i < m]
            for i in ends:
                mass[i, i] += ell / 3.0
                lap[i, i] += 1.0 / ell
            if len(ends) == 2 and a != b:
                mass[a, b] += ell / 6.0
                mass[b, a] += ell / 6.0
                lap[a, b] -= 1.0 / ell
                lap[b, a] -= 1.0 / ell
    lam, vecs = sla.eigh(lap, mass)
    lam = np.maximum(lam, 0.0)
    rows = np.searchsorted(mesh.boundary_nodes, mesh.sigma_nodes)
    basis = TraceBasis(mesh, np.asarray(mesh.sigma_nodes), s, closed, mass, lap, lam, vecs, rows)
    cache["trace_basis"] = basis
    return basis


@dataclass(eq=False)
class DtnOperator:
    """Matrix ``A[i, j] = <Lambda_q phi_j, phi_i>`` on a trace basis."""

    matrix: np.ndarray
    basis: TraceBasis
    fingerprint: tuple | None = None
    solutions: np.ndarray | None = field(default=None, repr=False)

    def __sub__(self, other: "DtnOperator") -> "DtnOperator":
        if other.basis is not self.basis:
            raise ValueError("DtN operators assembled on different trace bases")
        return DtnOperator(self.matrix - other.matrix, self.basis)

    def norm(self) -> float:
        return operator_norm(self.matrix, self.basis)


def boundary_data(basis: TraceBasis) -> np.ndarray:
    """Dirichlet data of every hat function, one column per Sigma node."""
    nb = len(basis.mesh.boundary_nodes)
    g = np.zeros((nb, basis.size))
    g[basis.boundary_rows, np.arange(basis.size)] = 1.0
    return g


def harmonic_lift(basis: TraceBasis) -> np.ndarray:
    """Discrete Laplace-harmonic extensions of the hat functions (cached)."""
    cache = basis.mesh.__dict__.setdefault("_fem_cache", {})
    if "harmonic_lift" not in cache:
        mesh = basis.mesh
        K = stiffness_matrix(mesh).tocsc()
        I, B = mesh.interior_nodes, mesh.boundary_nodes
        gb = boundary_data(basis)
        lift = np.zeros((mesh.n_nodes, basis.size))
        lift[B] = gb
        if len(I):
            lift[I] = splu(K[I][:, I].tocsc()).solve(-(K[I][:, B] @ gb))
        cache["harmonic_lift"] = lift
    return cache["harmonic_lift"]


def hat_lift(basis: TraceBasis) -> sp.csr_matrix:
    n = basis.mesh.n_nodes
    return sp.csr_matrix((np.ones(basis.size), (basis.nodes, np.arange(basis.size))), shape=(n, basis.size))


def assemble_dtn(
    mesh: Mesh,
    q: Potential | np.ndarray,
    basis: TraceBasis | None = None,
    *,
    lift: str = "harmonic",
    keep_solutions: bool = False,
    workers: int = 1,
) -> DtnOperator:
    """Assemble the DtN matrix from the volume form, no normal derivatives.

    Column ``j`` solves the forward problem with trace ``phi_j``; row ``i``
    tests the residual form against a lift of ``phi_i``.
    """
    if lift not in LIFTS:
        raise ValueError(f"lift must be one of {LIFTS}")
    basis = trace_basis(mesh) if basis is None else basis
    sys_ = system(mesh, q)
    sys_.check()
    U = sys_.solve(boundary_data(basis), workers=workers)
    U = U.reshape(mesh.n_nodes, -1)
    R = sys_.matrix @ U
    if lift == "hat":
        A = R[basis.nodes]
    elif lift == "solution":
        A = U.T @ R
    else:
        A = harmonic_lift(basis).T @ R
    values = sys_.q if not isinstance(sys_.q, Potential) else sys_.q.values
    return DtnOperator(
        np.asarray(A), basis, tuple(complex(v) for v in np.atleast_1d(values)), U if keep_solutions else None
    )


def scaled_matrix(delta: np.ndarray, basis: TraceBasis) -> np.ndarray:
    """``W^{-1} Psi^T delta Psi W^{-1}``: the matrix in the normalized eigenbasis."""
    psi = basis.eigvecs
    w = basis.weights
    return (psi.T @ delta @ psi) / np.outer(w, w)


def unscale_matrix(scaled: np.ndarray, basis: TraceBasis) -> np.ndarray:
    """Inverse of ``scaled_matrix``."""
    mp = basis.mass @ basis.eigvecs
    w = basis.weights
    return mp @ (scaled * np.outer(w, w)) @ mp.T


def operator_norm(delta, basis: TraceBasis) -> float:
    """Spectral-surrogate norm of a DtN matrix (difference) from H^{1/2} to H^{-1/2}."""
    if isinstance(delta, DtnOperator):
        delta = delta.matrix
    delta = np.asarray(delta)
    if delta.shape != (basis.size, basis.size):
        raise ValueError("matrix does not match the trace basis")
    if not np.any(delta):
        return 0.0
    return float(np.linalg.norm(scaled_matrix(delta, basis), 2))


def fourier_rayleigh_quotients(op: DtnOperator, modes, center=(0.0, 0.0)) -> np.ndarray:
    """``g^T A g / g^T M g`` for ``g = cos(k theta)`` on the Sigma nodes."""
    basis = op.basis
    p = basis.points - np.asarray(center)
    theta = np.arctan2(p[:, 1], p[:, 0])
    out = []
    for k in modes:
        g = np.cos(k * theta)
        out.append(float(np.real(g @ op.matrix @ g) / (g @ basis.mass @ g)))
    return np.array(out)


def save_dtn(op: DtnOperator, path: str | Path) -> None:
    b = op.basis
    np.savez(
        path,
        matrix=op.matrix,
        sigma_nodes=b.nodes,
        sigma_points=b.points,
        arclength=b.arclength,
        eigvals=b.eigvals,
        potential=np.array(op.fingerprint if op.fingerprint is not None else [], dtype=complex),
    )


__all__ = [
    "DtnOperator",
    "EigenvalueError",
    "TraceBasis",
    "assemble_dtn",
    "fourier_rayleigh_quotients",
    "operator_norm",
    "save_dtn",
    "scaled_matrix",
    "trace_basis",
    "unscale_matrix",
]
