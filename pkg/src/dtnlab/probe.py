"""Singular-function probes: interface blow-up, the boundary/volume identity and
three-circle interpolation checks."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constants import (  # noqa: F401  (re-exported evaluators)
    BETA,
    ConstantsLedger,
    Tower,
    delta_sequence,
    omega,
    recursion_bound,
    smallness_exponents,
)
from .dtn import assemble_dtn, trace_basis
from .geometry import Chain, GeometryError, chain_to, interface_normal
from .greens import GreensField, greens_field
from .mesh import LABEL_EXTENSION, Mesh
from .quadrature import subdivided_rule


class ProbeError(ValueError):
    pass


@dataclass(eq=False)
class SingularProbe:
    """Two potentials on a mesh of the extended domain, with a chain to a target cell.

    Green fields are computed lazily and cached per source point.
    """

    mesh: Mesh
    q1: np.ndarray
    q2: np.ndarray
    chain: Chain
    kind: str = "dipole"
    _greens: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.q1 = np.atleast_1d(np.asarray(self.q1, dtype=complex))
        self.q2 = np.atleast_1d(np.asarray(self.q2, dtype=complex))
        if self.q1.shape != self.q2.shape:
            raise ProbeError("potentials have different lengths")

    @property
    def partition(self):
        return self.mesh.partition

    @property
    def difference(self) -> np.ndarray:
        return self.q1 - self.q2

    def w_cells(self, k: int) -> tuple[int, ...]:
        """The first ``k`` chain cells."""
        return tuple(self.chain.indices[:k])

    def u_cells(self, k: int) -> tuple[int, ...]:
        """Cells of Omega outside the first ``k`` chain cells."""
        w = set(self.w_cells(k))
        return tuple(j for j in range(len(self.q1)) if j not in w)

    def green(self, which: int, y) -> GreensField:
        key = (which, tuple(np.round(np.asarray(y, float), 15)))
        if key not in self._greens:
            q = self.q1 if which == 1 else self.q2
            self._greens[key] = greens_field(self.mesh, q, y, self.kind)
        return self._greens[key]

    def omega_mesh(self) -> Mesh:
        cache = self.mesh.__dict__.setdefault("_fem_cache", {})
        if "omega_mesh" not in cache:
            cache["omega_mesh"] = self.mesh.omega()
        return cache["omega_mesh"]


def make_probe(mesh: Mesh, q1, q2, target: int | None = None, kind: str = "dipole") -> SingularProbe:
    if mesh.partition is None:
        raise ProbeError("mesh carries no partition")
    n = mesh.partition.n_cells
    target = n - 1 if target is None else target
    return SingularProbe(mesh, q1, q2, chain_to(mesh.partition, target), kind)


def _cell_integral(probe: SingularProbe, cells, y, z, difference, ratio=0.5, max_depth=14) -> complex:
    mesh = probe.mesh
    diff = np.asarray(difference, dtype=complex)
    tris = np.flatnonzero(np.isin(mesh.labels, [c for c in cells if diff[c] != 0]))
    if len(tris) == 0:
        return 0.0 + 0.0j
    sing = np.vstack([y, z])
    pts, w, parent, bary = subdivided_rule(mesh.corners[tris], sing, ratio=ratio, max_depth=max_depth, rule="gauss7")
    host = tris[parent]
    g1 = probe.green(1, y).at_quadrature(pts, host, bary)
    g2 = probe.green(2, z).at_quadrature(pts, host, bary)
    return complex(np.sum(w * diff[mesh.labels[host]] * g1 * g2))


def singular_function(probe: SingularProbe, k: int, y, z, *, difference=None) -> complex:
    """``S_k(y, z)``: integral over U_k of ``(q1 - q2) G1(., y) G2(., z)``.

    ``U_k`` is Omega minus the first ``k`` chain cells.  ``difference``
    overrides ``q1 - q2`` in the integrand while keeping the Green fields.
    """
    y, z = np.asarray(y, float), np.asarray(z, float)
    u = probe.u_cells(k)
    cells_yz = probe.partition.locate_cell(np.vstack([y, z]))
    if np.any(np.isin(cells_yz, u)):
        raise ProbeError("y and z must lie outside U_k")
    diff = probe.difference if difference is None else difference
    return _cell_integral(probe, u, y, z, diff)


@dataclass(frozen=True)
class AlessandriniResult:
    volume_side: complex
    boundary_side: complex
    relative_gap: float


def alessandrini_gap(probe: SingularProbe, y, z, *, trace_tol: float = 1e-10) -> AlessandriniResult:
    """Volume integral of ``(q1 - q2) G1 G2`` over Omega against the DtN pairing of the traces.

    Both sources lie in the extension cell; the traces of ``G1(., y)`` and
    ``G2(., z)`` on the boundary of Omega must be supported in Sigma.
    """
    y, z = np.asarray(y, float), np.asarray(z, float)
    mesh = probe.mesh
    for p in (y, z):
        tri, _ = mesh.locator.locate(p[None])
        if tri[0] < 0 or mesh.labels[tri[0]] != LABEL_EXTENSION:
            raise ProbeError(f"source {p} must lie in the extension cell")
    sub = probe.omega_mesh()
    basis = trace_basis(sub)
    g1 = probe.green(1, y)
    g2 = probe.green(2, z)
    parent = sub.parent_nodes
    off_sigma = np.setdiff1d(sub.boundary_nodes, sub.sigma_nodes)
    t1, t2 = g1.nodal(parent), g2.nodal(parent)
    leak = max(np.abs(t1[off_sigma]).max(initial=0), np.abs(t2[off_sigma]).max(initial=0))
    if leak > trace_tol * max(np.abs(t1).max(), np.abs(t2).max()):
        raise ProbeError(f"traces are not supported in Sigma (off-Sigma value {leak:.3e})")
    A1 = assemble_dtn(sub, probe.q1, basis).matrix
    A2 = assemble_dtn(sub, probe.q2, basis).matrix
    boundary = complex(t2[basis.nodes] @ (A1 - A2) @ t1[basis.nodes])
    volume = _cell_integral(probe, range(len(probe.q1)), y, z, probe.difference)
    scale = abs(volume) if volume != 0 else 1.0
    gap = abs(volume - boundary) / scale if (volume != 0 or boundary != 0) else 0.0
    return AlessandriniResult(volume, boundary, float(gap))


@dataclass
class BlowupScan:
    radii: np.ndarray
    values: np.ndarray
    intercept: float
    slope: float
    residuals: np.ndarray
    r_squared: float
    skipped: list

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "abs_S", "fit_residual"])
            for r, s, e in zip(self.radii, self.values, self.residuals):
                w.writerow([f"{r:.12g}", f"{s:.12g}", f"{e:.12g}"])


def fit_log_law(radii, values) -> tuple[float, float, np.ndarray, float]:
    """Least-squares ``values ~ a + b |ln r|``; returns ``(a, b, residuals, R^2)``."""
    radii, values = np.asarray(radii, float), np.asarray(values, float)
    design = np.column_stack([np.ones_like(radii), np.abs(np.log(radii))])
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    resid = values - design @ coef
    spread = np.sum((values - values.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / spread if spread > 0 else 1.0
    return float(coef[0]), float(coef[1]), resid, float(r2)


def approach_point(probe: SingularProbe, k: int, r: float) -> np.ndarray:
    """``P_k - r nu``: a point at distance ``r`` from the k-th interface, inside the earlier cell.

    ``k`` counts chain cells from 1, so the interface lies between chain
    cells ``k - 1`` and ``k``.
    """
    if not 2 <= k <= len(probe.chain):
        raise ProbeError(f"k must lie in [2, {len(probe.chain)}]")
    inner, outer = probe.chain.indices[k - 2], probe.chain.indices[k - 1]
    p = probe.chain.crossing_points[k - 2]
    nu = interface_normal(probe.partition, inner, outer)
    return p - r * nu


def interface_blowup_scan(probe: SingularProbe, k: int, radii, path: str | Path | None = None) -> BlowupScan:
    """``|S_{k-1}(y_r, y_r)|`` as ``y_r`` approaches the interface between chain cells k-1 and k."""
    r1 = probe.partition.r1
    radii = np.sort(np.asarray(radii, float))[::-1]
    if np.any((radii <= 0) | (radii >= 2 * r1)):
        raise ProbeError(f"radii must lie in (0, 2 r1) = (0, {2 * r1:.4g})")
    w = probe.w_cells(k - 1)
    kept, vals, skipped = [], [], []
    for r in radii:
        y = approach_point(probe, k, r)
        cell = probe.partition.locate_cell(y[None])[0]
        if cell not in w:
            warnings.warn(f"y_r for r = {r:.3g} leaves W_(k-1); skipped", stacklevel=2)
            skipped.append(float(r))
            continue
        kept.append(r)
        vals.append(abs(singular_function(probe, k - 1, y, y)))
    kept, vals = np.array(kept), np.array(vals)
    if len(kept) >= 2:
        a, b, resid, r2 = fit_log_law(kept, vals)
    else:
        a, b, resid, r2 = np.nan, np.nan, np.full(len(kept), np.nan), np.nan
    scan = BlowupScan(kept, vals, a, b, resid, r2, skipped)
    if path is not None:
        scan.write_csv(path)
    return scan


# ---------------------------------------------------------------------------
# three circles


@dataclass(frozen=True)
class ThreeSpheresResult:
    lhs: float
    rhs: float
    exponent: float
    Q: float
    norms: tuple[float, float, float]


def hadamard_exponent(r1: float, r2: float, r3: float) -> float:
    return np.log(r3 / r2) / np.log(r3 / r1)


def corollary_exponent(r1: float, r2: float, r3: float) -> float:
    return np.log(2 * r3 / (r2 + r3)) / np.log(r3 / r1)


def _ball_norm(field, center, radius, mode, n_radial=64, n_angle=256) -> float:
    theta = 2 * np.pi * np.arange(n_angle) / n_angle
    ring = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    if mode == "Linf":
        rho = radius * np.linspace(0.0, 1.0, n_radial + 1)[1:]
        pts = center + rho[:, None, None] * ring[None]
        vals = np.abs(field(pts.reshape(-1, 2)))
        vals = np.append(vals, np.abs(field(np.asarray(center, float)[None])))
        return float(np.max(vals))
    if mode == "L2":
        t, w = np.polynomial.legendre.leggauss(n_radial)
        rho = 0.5 * radius * (t + 1)
        pts = center + rho[:, None, None] * ring[None]
        vals = np.abs(field(pts.reshape(-1, 2)).reshape(n_radial, n_angle)) ** 2
        return float(np.sqrt(np.sum(vals.mean(axis=1) * 2 * np.pi * rho * 0.5 * radius * w)))
    raise ValueError("mode must be 'L2' or 'Linf'")


def three_spheres_check(
    field, center, rho1: float, rho2: float, rho3: float, mode: str = "Linf", exponent: str = "hadamard"
) -> ThreeSpheresResult:
    """Empirical constant ``Q = ||u||_{rho2} / (||u||_{rho1}^a ||u||_{rho3}^{1-a})``.

    ``field`` is any callable on (P, 2) point arrays.  ``exponent`` selects
    the Hadamard exponent ``ln(rho3/rho2)/ln(rho3/rho1)`` or the weaker
    ``ln(2 rho3/(rho2 + rho3))/ln(rho3/rho1)``.
    """
    if not 0 < rho1 < rho2 < rho3:
        raise ProbeError("radii must satisfy 0 < rho1 < rho2 < rho3")
    center = np.asarray(center, float)
    a = {"hadamard": hadamard_exponent, "corollary": corollary_exponent}[exponent](rho1, rho2, rho3)
    n1, n2, n3 = (_ball_norm(field, center, r, mode) for r in (rho1, rho2, rho3))
    rhs = n1**a * n3 ** (1 - a)
    return ThreeSpheresResult(n2, rhs, float(a), n2 / rhs if rhs > 0 else np.inf, (n1, n2, n3))


__all__ = [
    "AlessandriniResult",
    "BETA",
    "BlowupScan",
    "ConstantsLedger",
    "GeometryError",
    "ProbeError",
    "SingularProbe",
    "ThreeSpheresResult",
    "Tower",
    "alessandrini_gap",
    "approach_point",
    "delta_sequence",
    "fit_log_law",
    "interface_blowup_scan",
    "make_probe",
    "omega",
    "recursion_bound",
    "singular_function",
    "smallness_exponents",
    "three_spheres_check",
]
