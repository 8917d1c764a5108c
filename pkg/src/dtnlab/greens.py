"""Singular kernels and meshed singular solutions G = Gamma + omega in the plane."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import gamma as gamma_fn
from pathlib import Path

import numpy as np
from scipy.special import hankel1

from .fem import Field, load_vector, potential_on_triangles, system
from .geometry import Potential
from .mesh import Mesh
from .quadrature import subdivided_rule

KINDS = ("dipole", "monopole")
HANKEL_DIMENSIONS = range(4, 10)


class UnsupportedDimensionError(ValueError):
    pass


class SourcePlacementError(ValueError):
    """Source point too close to the boundary or outside the mesh."""


def _separation(x, y):
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r == 0):
        raise ValueError("kernel evaluated at x = y")
    return d, r


def dipole_kernel(n: int, x, y) -> np.ndarray:
    """Kernel with -Delta Gamma = d/dx_n delta_y.

    n = 2: ``-(x2 - y2) / (2 pi |x - y|^2)``;  n = 3: ``-(x3 - y3) / (4 pi |x - y|^3)``.
    """
    d, r = _separation(x, y)
    if n == 2:
        return -d[..., 1] / (2.0 * np.pi * r**2)
    if n == 3:
        return -d[..., 2] / (4.0 * np.pi * r**3)
    raise UnsupportedDimensionError(f"dipole kernel exists for n = 2, 3 only (got n = {n})")


def laplace_fundamental(n: int, x, y) -> np.ndarray:
    """Fundamental solution of -Delta: ``-ln r / (2 pi)`` in the plane, ``r^{2-n} / ((n-2) |S^{n-1}|)`` above."""
    _, r = _separation(x, y)
    if n == 2:
        return -np.log(r) / (2.0 * np.pi)
    if n < 2:
        raise UnsupportedDimensionError(f"n = {n}")
    sphere = 2.0 * np.pi ** (n / 2) / gamma_fn(n / 2)
    return r ** (2 - n) / ((n - 2) * sphere)


def monopole_kernel(x, y) -> np.ndarray:
    return laplace_fundamental(2, x, y)


def hankel_fundamental(n: int, q_m: complex, x, y) -> np.ndarray:
    """``q^{(n-2)/4} H^(1)_{(n-2)/2}(sqrt(q) r) / (4i (2 pi)^{(n-2)/2} r^{(n-2)/2})``.

    Its leading singularity is ``-laplace_fundamental(n, x, y)``.
    """
    if n not in HANKEL_DIMENSIONS:
        raise UnsupportedDimensionError(f"Hankel kernel supported for 4 <= n <= 9 only (got n = {n})")
    _, r = _separation(x, y)
    order = (n - 2) / 2.0
    root = np.sqrt(complex(q_m))
    if root == 0:
        raise ValueError("q_m must be nonzero")
    return root**order * hankel1(order, root * r) / (4j * (2.0 * np.pi) ** order * r**order)


def kernel(kind: str, x, y) -> np.ndarray:
    if kind == "dipole":
        return dipole_kernel(2, x, y)
    if kind == "monopole":
        return monopole_kernel(x, y)
    raise ValueError(f"kind must be one of {KINDS}")


@dataclass(eq=False)
class GreensField:
    """``G(x) = Gamma(x, y) + omega(x)`` with ``omega`` a P1 field on the mesh (or absent)."""

    mesh: Mesh
    source: np.ndarray
    kind: str
    omega: Field | None
    q: np.ndarray | None = None

    def kernel(self, points) -> np.ndarray:
        return kernel(self.kind, np.atleast_2d(points), self.source)

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(points)
        out = self.kernel(points).astype(complex)
        if self.omega is not None:
            out += self.omega.evaluate(points)
        return out

    def at_quadrature(self, points, triangles, bary) -> np.ndarray:
        """Values at points with known host triangles and barycentrics."""
        out = self.kernel(points).astype(complex)
        if self.omega is not None:
            out += np.einsum("pi,pi->p", self.omega.values[self.mesh.triangles[triangles]], bary)
        return out

    def nodal(self, nodes: np.ndarray) -> np.ndarray:
        """Values at mesh nodes (which must differ from the source)."""
        out = self.kernel(self.mesh.nodes[nodes]).astype(complex)
        if self.omega is not None:
            out += self.omega.values[nodes]
        return out

    @property
    def boundary_distance(self) -> float:
        return boundary_distance(self.mesh, self.source)


def _segment_distances(p, a, b) -> np.ndarray:
    d = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, d) / np.einsum("ij,ij->i", d, d), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * d), axis=1)


def boundary_distance(mesh: Mesh, point) -> float:
    e = mesh.boundary_edges
    return float(np.min(_segment_distances(np.asarray(point, float), mesh.nodes[e[:, 0]], mesh.nodes[e[:, 1]])))


def greens_field(
    mesh: Mesh,
    q: Potential | np.ndarray,
    y,
    kind: str = "dipole",
    *,
    min_distance: float | None = None,
    ratio: float = 0.25,
    max_depth: int = 14,
) -> GreensField:
    """Singular solution with source ``y``: solve for the regular remainder on the mesh.

    The remainder solves ``(-Delta + q) omega = -q Gamma`` with
    ``omega = -Gamma`` on the boundary, so that ``G = Gamma + omega``
    vanishes on the boundary and ``(-Delta + q) G = -Delta Gamma``.
    """
    y = np.asarray(y, dtype=float)
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    tri, _ = mesh.locator.locate(y[None])
    if tri[0] < 0:
        raise SourcePlacementError(f"source {y} lies outside the mesh")
    if min_distance is None:
        min_distance = mesh.partition.r1 if mesh.partition is not None else 0.0
    dist = boundary_distance(mesh, y)
    if dist < min_distance:
        raise SourcePlacementError(f"source at distance {dist:.3g} from the boundary, below {min_distance:.3g}")
    sys_ = system(mesh, q)
    qt = potential_on_triangles(mesh, sys_.q)
    b = load_vector(
        mesh,
        lambda p: kernel(kind, p, y),
        coefficient=-qt,
        singular_points=y,
        near=3.0 * mesh.h,
        ratio=ratio,
        max_depth=max_depth,
    )
    g = -kernel(kind, mesh.nodes[mesh.boundary_nodes], y)
    omega = Field(mesh, sys_.solve(g, b))
    return GreensField(mesh, y, kind, omega, qt)


def kernel_field(mesh: Mesh, y, kind: str = "dipole") -> GreensField:
    """The bare kernel as a GreensField (no remainder)."""
    return GreensField(mesh, np.asarray(y, dtype=float), kind, None)


def _polar_integral(field: GreensField, r_in: float, r_out: float, n_radial: int = 48, n_angle: int = 128) -> float:
    if r_out <= r_in:
        return 0.0
    # Gauss-Legendre in log(rho), midpoint rule in angle
    t, w = np.polynomial.legendre.leggauss(n_radial)
    a, b = np.log(r_in), np.log(r_out)
    log_rho = 0.5 * (b - a) * t + 0.5 * (b + a)
    rho = np.exp(log_rho)
    w_rho = 0.5 * (b - a) * w * rho**2  # d rho = rho d log rho, times the Jacobian rho
    theta = 2.0 * np.pi * (np.arange(n_angle) + 0.5) / n_angle
    pts = field.source + rho[:, None, None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1)[None]
    vals = np.abs(field(pts.reshape(-1, 2)).reshape(n_radial, n_angle)) ** 2
    return float(np.sum(vals.mean(axis=1) * 2.0 * np.pi * w_rho))


def _outer_integral(field: GreensField, split: float, outer: float, circle_depth: int) -> float:
    cache = field.__dict__.setdefault("_outer", {})
    key = (split, outer, circle_depth)
    if key not in cache:
        mesh, y = field.mesh, field.source
        circles = [(y, split)] + ([(y, outer)] if np.isfinite(outer) else [])
        corner_rho = np.linalg.norm(mesh.corners - y, axis=2)
        live = np.flatnonzero((corner_rho.max(axis=1) > split) & (corner_rho.min(axis=1) < outer))
        pts, w, parent, bary = subdivided_rule(mesh.corners[live], None, rule="gauss7", circles=circles, max_depth=circle_depth)
        rho = np.linalg.norm(pts - y, axis=1)
        keep = (rho >= split) & (rho < outer)
        vals = field.at_quadrature(pts[keep], live[parent[keep]], bary[keep])
        cache[key] = float(np.sum(w[keep] * np.abs(vals) ** 2))
    return cache[key]


def annulus_l2_norm(field: GreensField, r: float, outer: float | None = None, *, circle_depth: int = 9) -> float:
    """L2 norm of G over ``{x in mesh : r < |x - y| < outer}`` (``outer`` infinite by default).

    Inside half the boundary distance a polar rule with exact kernel values
    is used; further out, element quadrature refined along the cut circles.
    """
    y = field.source
    inner_limit = 0.5 * boundary_distance(field.mesh, y)
    if not 0 < r <= inner_limit * (1 + 1e-12):
        raise SourcePlacementError(f"r = {r} must lie in (0, {inner_limit:.4g}] (half the boundary distance)")
    outer = np.inf if outer is None else float(outer)
    if outer <= r:
        return 0.0
    split = min(inner_limit, outer)
    total = _polar_integral(field, r, split)
    if outer > split:
        total += _outer_integral(field, split, outer, circle_depth)
    return float(np.sqrt(total))


def remainder_l2_norm(field: GreensField) -> float:
    return 0.0 if field.omega is None else field.omega.l2_norm()


def symmetry_defect(
    mesh: Mesh, q: Potential | np.ndarray, pairs, kind: str = "dipole"
) -> tuple[np.ndarray, np.ndarray, float]:
    """Evaluate ``G(x, y)`` and ``G(y, x)`` with two independent solves per pair.

    Returns the two value arrays and ``max |G(x,y) - G(y,x)| / max |G|``.
    """
    forward, backward = [], []
    for x, y in pairs:
        forward.append(greens_field(mesh, q, y, kind)(np.asarray(x)[None])[0])
        backward.append(greens_field(mesh, q, x, kind)(np.asarray(y)[None])[0])
    forward, backward = np.array(forward), np.array(backward)
    scale = max(np.abs(forward).max(), np.abs(backward).max())
    return forward, backward, float(np.abs(forward - backward).max() / scale)


def write_snapshot(field: GreensField, path: str | Path) -> None:
    """Node table ``x, y, re_G, im_G, re_omega, im_omega`` (G blank at the source)."""
    nodes = field.mesh.nodes
    omega = field.omega.values if field.omega is not None else np.zeros(len(nodes), complex)
    at_source = np.linalg.norm(nodes - field.source, axis=1) == 0
    G = np.full(len(nodes), np.nan, dtype=complex)
    G[~at_source] = field.kernel(nodes[~at_source]) + omega[~at_source]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "re_G", "im_G", "re_omega", "im_omega"])
        for (px, py), g, o in zip(nodes, G, omega):
            w.writerow([f"{px:.12g}", f"{py:.12g}", f"{g.real:.12g}", f"{g.imag:.12g}", f"{o.real:.12g}", f"{o.imag:.12g}"])


__all__ = [
    "GreensField",
    "SourcePlacementError",
    "UnsupportedDimensionError",
    "annulus_l2_norm",
    "dipole_kernel",
    "greens_field",
    "hankel_fundamental",
    "kernel_field",
    "laplace_fundamental",
    "monopole_kernel",
    "boundary_distance",
    "symmetry_defect",
    "write_snapshot",
]
