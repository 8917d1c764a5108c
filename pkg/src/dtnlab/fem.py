"""P1 finite elements for (-Delta + q) u = f with Dirichlet data and complex q."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, splu, svds

from .geometry import Potential
from .mesh import LABEL_EXTENSION, Mesh, fixed_label
from .quadrature import GAUSS3_BARY, GAUSS3_W, subdivided_rule

GUARD_THRESHOLD = 1e-8
RESIDUAL_TOL = 1e-10
EXTENSION_POTENTIAL = 1.0

_LOCAL_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0


class EigenvalueError(RuntimeError):
    """Zero is (numerically) a Dirichlet eigenvalue of -Delta + q on the mesh."""


@dataclass(frozen=True)
class GuardResult:
    passed: bool
    margin: float
    threshold: float = GUARD_THRESHOLD

    def __bool__(self) -> bool:
        return self.passed


def _cache(mesh: Mesh) -> dict:
    return mesh.__dict__.setdefault("_fem_cache", {})


def _scatter(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def shape_gradients(mesh: Mesh) -> np.ndarray:
    """Constant gradients of the three hat functions on every triangle, shape (T, 3, 2)."""
    cache = _cache(mesh)
    if "grads" not in cache:
        c = mesh.corners
        # rotate opposite edges by 90 degrees
        e = np.stack([c[:, 2] - c[:, 1], c[:, 0] - c[:, 2], c[:, 1] - c[:, 0]], axis=1)
        g = np.stack([e[..., 1], -e[..., 0]], axis=-1) / (2.0 * mesh.areas[:, None, None])
        cache["grads"] = -g
    return cache["grads"]


def stiffness_matrix(mesh: Mesh) -> sp.csr_matrix:
    cache = _cache(mesh)
    if "stiffness" not in cache:
        g = shape_gradients(mesh)
        local = np.einsum("tik,tjk->tij", g, g) * mesh.areas[:, None, None]
        cache["stiffness"] = _scatter(mesh, local)
    return cache["stiffness"]


def mass_matrix(mesh: Mesh, label: int | None = None) -> sp.csr_matrix:
    """Mass matrix over all triangles or over those carrying ``label``."""
    cache = _cache(mesh)
    key = ("mass", label)
    if key not in cache:
        weight = mesh.areas if label is None else np.where(mesh.labels == label, mesh.areas, 0.0)
        cache[key] = _scatter(mesh, weight[:, None, None] * _LOCAL_MASS)
    return cache[key]


def potential_on_triangles(mesh: Mesh, q: Potential | np.ndarray) -> np.ndarray:
    """Complex value of the potential on every triangle."""
    values = q.values if isinstance(q, Potential) else np.atleast_1d(np.asarray(q, dtype=complex))
    out = np.empty(mesh.n_triangles, dtype=complex)
    cells = mesh.labels >= 0
    if cells.any() and mesh.labels[cells].max() >= len(values):
        raise ValueError(f"potential has {len(values)} values but the mesh has cell {mesh.labels[cells].max()}")
    out[cells] = values[mesh.labels[cells]]
    out[mesh.labels == LABEL_EXTENSION] = EXTENSION_POTENTIAL
    if mesh.partition is not None:
        for i, reg in enumerate(mesh.partition.fixed_regions):
            out[mesh.labels == fixed_label(i)] = reg.value
    return out


def assemble_matrix(mesh: Mesh, q: Potential | np.ndarray) -> sp.csr_matrix:
    """Complex symmetric matrix of the form  int grad u . grad v + q u v."""
    qt = potential_on_triangles(mesh, q)
    mat = stiffness_matrix(mesh).astype(complex)
    for value in np.unique(qt):
        if value == 0:
            continue
        labels = np.unique(mesh.labels[qt == value])
        for lab in labels:
            mat = mat + value * mass_matrix(mesh, int(lab))
    return mat.tocsr()


def load_vector(
    mesh: Mesh,
    f,
    *,
    coefficient: np.ndarray | None = None,
    singular_points=None,
    near: float | None = None,
    ratio: float = 0.5,
    max_depth: int = 10,
) -> np.ndarray:
    """Load vector ``b_i = int coefficient * f * phi_i``.

    ``f`` is a callable on (P, 2) point arrays.  Triangles within distance
    ``near`` of a singular point use recursively subdivided quadrature;
    the others use the interior 3-point rule.
    """
    coef = np.ones(mesh.n_triangles) if coefficient is None else np.asarray(coefficient)
    active = np.flatnonzero(coef != 0)
    b = np.zeros(mesh.n_nodes, dtype=complex)
    if len(active) == 0:
        return b
    fine = np.zeros(len(active), dtype=bool)
    if singular_points is not None:
        sing = np.atleast_2d(singular_points)
        reach = 3.0 * mesh.h if near is None else near
        cen = mesh.centroids[active]
        for s in sing:
            fine |= np.linalg.norm(cen - s, axis=1) <= reach
    coarse = active[~fine]
    if len(coarse):
        pts = np.einsum("qi,tij->tqj", GAUSS3_BARY, mesh.corners[coarse])
        vals = f(pts.reshape(-1, 2)).reshape(len(coarse), 3) * coef[coarse, None]
        contrib = mesh.areas[coarse, None] * np.einsum("tq,q,qi->ti", vals, GAUSS3_W, GAUSS3_BARY)
        np.add.at(b, mesh.triangles[coarse], contrib)
    near_tris = active[fine]
    if len(near_tris):
        pts, w, parent, bary = subdivided_rule(mesh.corners[near_tris], sing, ratio=ratio, max_depth=max_depth)
        vals = f(pts) * coef[near_tris][parent] * w
        np.add.at(b, mesh.triangles[near_tris][parent], vals[:, None] * bary)
    return b


class FemSystem:
    """Assembled and factorized system for one (mesh, potential) pair.

    The factorization of the interior block is computed once and reused for
    every right-hand side.
    """

    def __init__(self, mesh: Mesh, q: Potential | np.ndarray):
        self.mesh = mesh
        self.q = q
        self.matrix = assemble_matrix(mesh, q)
        self.interior = mesh.interior_nodes
        self.boundary = mesh.boundary_nodes
        csc = self.matrix.tocsc()
        self.K_II = csc[self.interior][:, self.interior].tocsc()
        self.K_IB = csc[self.interior][:, self.boundary].tocsc()
        self._lu = None
        self._singular = False
        try:
            self._lu = splu(self.K_II)
        except RuntimeError:
            self._singular = True

    @cached_property
    def guard(self) -> GuardResult:
        if self._singular:
            return GuardResult(False, 0.0)
        n = self.K_II.shape[0]
        if n == 0:
            return GuardResult(True, np.inf)
        lu = self._lu
        inverse = LinearOperator(
            (n, n),
            matvec=lambda x: lu.solve(np.asarray(x, dtype=complex).ravel()),
            rmatvec=lambda x: lu.solve(np.asarray(x, dtype=complex).ravel(), trans="H"),
            dtype=complex,
        )
        rng = np.random.default_rng(0)
        v0 = rng.standard_normal(n) + 0j
        if n <= 2:
            dense = self.K_II.toarray()
            s = np.linalg.svd(dense, compute_uv=False)
            smin, smax = s[-1], s[0]
        else:
            inv_norm = svds(inverse, k=1, return_singular_vectors=False, v0=v0, tol=1e-6)[0]
            smax = svds(self.K_II, k=1, return_singular_vectors=False, v0=v0, tol=1e-6)[0]
            smin = 1.0 / inv_norm if np.isfinite(inv_norm) and inv_norm > 0 else 0.0
        margin = float(smin / smax)
        return GuardResult(bool(margin > GUARD_THRESHOLD), margin)

    def check(self) -> None:
        g = self.guard
        if not g.passed:
            raise EigenvalueError(
                f"0 is numerically a Dirichlet eigenvalue of -Delta + q (relative smallest singular value "
                f"{g.margin:.3e} <= {g.threshold:.0e}); the forward problem requires that 0 is not an eigenvalue"
            )

    def solve(self, g=None, f=None, *, workers: int = 1) -> np.ndarray:
        """Nodal solutions for boundary data ``g`` and load vectors ``f``.

        ``g`` has one row per boundary node (``mesh.boundary_nodes`` order)
        or one row per node; ``f`` has one row per node.  Several right-hand
        sides are stacked as columns.
        """
        self.check()
        n = self.mesh.n_nodes
        single = (g is None or np.ndim(g) == 1) and (f is None or np.ndim(f) == 1)
        gb = self._boundary_values(g)
        ncols = gb.shape[1] if gb is not None else (1 if f is None or np.ndim(f) == 1 else np.shape(f)[1])
        if gb is None:
            gb = np.zeros((len(self.boundary), ncols), dtype=complex)
        rhs = -(self.K_IB @ gb)
        if f is not None:
            fi = np.asarray(f, dtype=complex).reshape(n, -1)[self.interior]
            rhs = rhs + fi
        u_int = self._solve_interior(rhs, workers)
        u = np.zeros((n, rhs.shape[1]), dtype=complex)
        u[self.interior] = u_int
        u[self.boundary] = gb
        return u[:, 0] if single else u

    def _boundary_values(self, g):
        if g is None:
            return None
        g = np.asarray(g, dtype=complex)
        g = g.reshape(g.shape[0], -1)
        if g.shape[0] == self.mesh.n_nodes:
            g = g[self.boundary]
        if g.shape[0] != len(self.boundary):
            raise ValueError("boundary data must have one row per boundary node or per node")
        return g

    def _solve_interior(self, rhs: np.ndarray, workers: int) -> np.ndarray:
        rhs = np.ascontiguousarray(rhs)
        if workers > 1 and rhs.shape[1] > 1:
            blocks = np.array_split(np.arange(rhs.shape[1]), workers)
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(lambda b: self._lu.solve(rhs[:, b]), blocks))
            x = np.concatenate(parts, axis=1)
        else:
            x = self._lu.solve(rhs)
        scale = np.maximum(np.linalg.norm(rhs, axis=0), 1e-300)
        res = np.linalg.norm(self.K_II @ x - rhs, axis=0) / scale
        if np.any(res > RESIDUAL_TOL):
            x = x + self._lu.solve(rhs - self.K_II @ x)
            res = np.linalg.norm(self.K_II @ x - rhs, axis=0) / scale
        if np.any(res > RESIDUAL_TOL):
            raise EigenvalueError(f"relative residual {res.max():.2e} above {RESIDUAL_TOL:.0e}")
        return x


def system(mesh: Mesh, q: Potential | np.ndarray) -> FemSystem:
    """Factorized system, cached per mesh and potential values."""
    values = q.values if isinstance(q, Potential) else np.atleast_1d(np.asarray(q, dtype=complex))
    key = ("system", values.tobytes())
    cache = _cache(mesh)
    if key not in cache:
        if len([k for k in cache if isinstance(k, tuple) and k[0] == "system"]) >= 16:
            for k in [k for k in cache if isinstance(k, tuple) and k[0] == "system"]:
                del cache[k]
        cache[key] = FemSystem(mesh, values)
    return cache[key]


def eigenvalue_guard(mesh: Mesh, q: Potential | np.ndarray) -> GuardResult:
    return system(mesh, q).guard


class Field:
    """Complex nodal P1 field on a mesh."""

    def __init__(self, mesh: Mesh, values: np.ndarray):
        values = np.asarray(values, dtype=complex)
        if values.shape != (mesh.n_nodes,):
            raise ValueError("field length must equal the node count")
        if not np.all(np.isfinite(values)):
            raise ValueError("field has non-finite values")
        self.mesh = mesh
        self.values = values

    def evaluate(self, points) -> np.ndarray:
        return self.mesh.locator.interpolate(self.values, np.atleast_2d(points))

    def l2_norm(self) -> float:
        u = self.values
        return float(np.sqrt(abs(np.vdot(u, mass_matrix(self.mesh) @ u))))

    def gradients(self) -> np.ndarray:
        """Constant gradient per triangle, shape (T, 2)."""
        return np.einsum("ti,tik->tk", self.values[self.mesh.triangles], shape_gradients(self.mesh))


def solve_dirichlet(mesh: Mesh, q: Potential | np.ndarray, g=None, f=None) -> Field:
    """Discrete weak solution of (-Delta + q) u = f with u = g on the boundary.

    ``g`` may be a callable on node coordinates or an array over boundary
    nodes (or over all nodes).  ``f`` may be a callable on points, which is
    integrated into a load vector, or a precomputed load vector.
    """
    sys_ = system(mesh, q)
    if callable(g):
        g = g(mesh.nodes[mesh.boundary_nodes])
    if callable(f):
        f = load_vector(mesh, f)
    return Field(mesh, sys_.solve(g, f))
