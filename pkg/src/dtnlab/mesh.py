"""Partition-aligned triangulations of Omega or the extended domain Omega_0."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import triangle

from .geometry import GeometryError, Partition, point_polyline_distance, polygon_area, polygon_edges
from .quadrature import PointLocator

LABEL_EXTENSION = -1
_ATTR_SHIFT = 100.0
_MERGE_TOL = 1e-12


class MeshError(ValueError):
    pass


def fixed_label(i: int) -> int:
    """Triangle label of the i-th fixed region of a partition."""
    return -2 - i


@dataclass(eq=False)
class Mesh:
    """Conforming P1 triangulation.

    ``labels`` holds the cell index of every triangle (``>= 0`` for unknown
    cells, ``LABEL_EXTENSION`` for the extension cell, ``fixed_label(i)``
    for fixed regions).  ``sigma_nodes`` lists the boundary nodes strictly
    inside Sigma, ordered along it; it is empty for meshes of Omega_0.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray
    partition: Partition | None = None
    parent_nodes: np.ndarray | None = None
    sigma_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    sigma_coords: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        c = self.nodes[self.triangles]
        signed = (c[:, 1, 0] - c[:, 0, 0]) * (c[:, 2, 1] - c[:, 0, 1]) - (c[:, 1, 1] - c[:, 0, 1]) * (
            c[:, 2, 0] - c[:, 0, 0]
        )
        if np.any(np.abs(signed) < 1e-300):
            raise MeshError("degenerate triangle in mesh")
        flip = signed < 0
        self.triangles[flip] = self.triangles[flip][:, [0, 2, 1]]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def corners(self) -> np.ndarray:
        return self.nodes[self.triangles]

    @cached_property
    def areas(self) -> np.ndarray:
        c = self.corners
        return 0.5 * (
            (c[:, 1, 0] - c[:, 0, 0]) * (c[:, 2, 1] - c[:, 0, 1]) - (c[:, 1, 1] - c[:, 0, 1]) * (c[:, 2, 0] - c[:, 0, 0])
        )

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.corners.mean(axis=1)

    @cached_property
    def edges(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1)

    @property
    def h(self) -> float:
        return float(self.edge_lengths.max())

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts == 1]

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def boundary_tags(self) -> np.ndarray:
        """1 for boundary nodes on Sigma, 0 for the rest (aligned with ``boundary_nodes``)."""
        return np.isin(self.boundary_nodes, self.sigma_nodes).astype(int)

    @cached_property
    def locator(self) -> PointLocator:
        return PointLocator(self.nodes, self.triangles)

    def restrict(self, keep_labels) -> "Mesh":
        """Submesh made of the triangles with the given labels; ``parent_nodes`` maps back."""
        keep = np.isin(self.labels, list(keep_labels))
        tris = self.triangles[keep]
        used = np.unique(tris)
        renum = np.full(self.n_nodes, -1)
        renum[used] = np.arange(len(used))
        return Mesh(self.nodes[used], renum[tris], self.labels[keep], partition=self.partition, parent_nodes=used)

    def omega(self) -> "Mesh":
        """Submesh of Omega (extension cell removed) with Sigma nodes tagged."""
        labels = set(np.unique(self.labels).tolist()) - {LABEL_EXTENSION}
        sub = self.restrict(labels)
        if self.partition is not None:
            tag_sigma(sub, self.partition)
        return sub

    def max_edge_in_disk(self, center, radius) -> float:
        e = self.edges
        mid = 0.5 * (self.nodes[e[:, 0]] + self.nodes[e[:, 1]])
        inside = np.linalg.norm(mid - np.asarray(center), axis=1) <= radius
        return float(self.edge_lengths[inside].max()) if inside.any() else 0.0


def tag_sigma(mesh: Mesh, partition: Partition, tol: float = 1e-10) -> None:
    """Record the boundary nodes strictly inside Sigma, ordered by arclength."""
    b = mesh.boundary_nodes
    sig = partition.sigma
    closed = partition.sigma_closed
    on = point_polyline_distance(mesh.nodes[b], sig, closed=closed) < tol
    cand = b[on]
    segs = polygon_edges(sig) if closed else np.stack([sig[:-1], sig[1:]], axis=1)
    lengths = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1)
    offsets = np.concatenate([[0.0], np.cumsum(lengths)])
    total = offsets[-1]
    s = np.full(len(cand), np.nan)
    for i, (a, bb) in enumerate(segs):
        d = bb - a
        t = ((mesh.nodes[cand] - a) @ d) / float(d @ d)
        dist = np.linalg.norm(mesh.nodes[cand] - (a + np.clip(t, 0, 1)[:, None] * d), axis=1)
        hit = (dist < tol) & np.isnan(s)
        s[hit] = offsets[i] + np.clip(t[hit], 0, 1) * lengths[i]
    if closed:
        s = np.mod(s, total)
        keep = np.ones(len(cand), dtype=bool)
    else:
        keep = (s > tol) & (s < total - tol)
    order = np.argsort(s[keep], kind="stable")
    mesh.sigma_nodes = cand[keep][order]
    mesh.sigma_coords = s[keep][order]
    mesh.__dict__.pop("boundary_tags", None)


class _PSLG:
    """Planar straight-line graph with merged vertices and split collinear segments."""

    def __init__(self):
        self.vertices: list[tuple[float, float]] = []
        self._index: dict[tuple[int, int], int] = {}
        self.raw_segments: list[tuple[int, int]] = []

    def vertex(self, p) -> int:
        key = (int(round(p[0] / _MERGE_TOL)), int(round(p[1] / _MERGE_TOL)))
        if key not in self._index:
            self._index[key] = len(self.vertices)
            self.vertices.append((float(p[0]), float(p[1])))
        return self._index[key]

    def _split_long(self, max_length: float) -> None:
        out = []
        for a, b in self.raw_segments:
            pa, pb = np.asarray(self.vertices[a]), np.asarray(self.vertices[b])
            k = int(np.ceil(np.hypot(*(pb - pa)) / max_length - 1e-9))
            ids = [a] + [self.vertex(pa + (pb - pa) * i / k) for i in range(1, k)] + [b]
            out.extend(zip(ids[:-1], ids[1:]))
        self.raw_segments = out

    def polygon(self, poly) -> None:
        ids = [self.vertex(p) for p in poly]
        for a, b in zip(ids, ids[1:] + ids[:1]):
            if a != b:
                self.raw_segments.append((a, b))

    def segments(self, max_length: float | None = None) -> np.ndarray:
        if max_length is not None:
            self._split_long(max_length)
        v = np.asarray(self.vertices)
        out = set()
        for a, b in self.raw_segments:
            pa, pb = v[a], v[b]
            d = pb - pa
            L2 = float(d @ d)
            t = ((v - pa) @ d) / L2
            cross = np.abs(d[0] * (v[:, 1] - pa[1]) - d[1] * (v[:, 0] - pa[0])) / np.sqrt(L2)
            on = np.flatnonzero((cross < 1e-10) & (t > 1e-12) & (t < 1 - 1e-12))
            chain = [a] + [int(i) for i in on[np.argsort(t[on])]] + [b]
            for p, q in zip(chain[:-1], chain[1:]):
                out.add((min(p, q), max(p, q)))
        return np.array(sorted(out), dtype=np.int32)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _interior_point(poly: np.ndarray) -> np.ndarray:
    if abs(polygon_area(poly)) < 1e-14:
        raise MeshError("degenerate polygon")
    n = len(poly)
    t = triangle.triangulate({"vertices": poly, "segments": np.column_stack([np.arange(n), (np.arange(n) + 1) % n])}, "pQ")
    c = t["vertices"][t["triangles"]]
    areas = np.abs(_cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]))
    return c[np.argmax(areas)].mean(axis=0)


def make_mesh(
    partition: Partition,
    h_target: float,
    refine_near=None,
    *,
    extension: bool = True,
    min_angle: float = 30.0,
) -> Mesh:
    """Triangulate the partition with edge lengths about ``h_target``.

    Parameters
    ----------
    refine_near : list of (point, radius), optional
        Disks in which every edge is refined to length ``<= h_target / 8``.
    extension : bool
        Include the extension cell ``D_0`` when the partition has one; the
        result is then a mesh of Omega_0 and ``Mesh.omega()`` gives Omega.

    Returns the mesh of Omega (with Sigma nodes tagged) when ``extension`` is
    false or the partition has no extension cell.
    """
    if not h_target > 0:
        raise MeshError(f"h_target must be positive, got {h_target}")
    g = _PSLG()
    regions = []
    for j, cell in enumerate(partition.subdomains):
        if abs(polygon_area(cell)) < 1e-14:
            raise MeshError(f"degenerate polygon for cell {j}")
        g.polygon(cell)
        regions.append((*_interior_point(cell), j + _ATTR_SHIFT))
    for i, reg in enumerate(partition.fixed_regions):
        g.polygon(reg.outer)
        for hole in reg.holes:
            g.polygon(hole)
        seed = reg.seed if reg.seed is not None else _interior_point(reg.outer)
        regions.append((seed[0], seed[1], fixed_label(i) + _ATTR_SHIFT))
    use_ext = extension and partition.extension_cell is not None
    if use_ext:
        g.polygon(partition.extension_cell)
        regions.append((*_interior_point(partition.extension_cell), LABEL_EXTENSION + _ATTR_SHIFT))
    g.polygon(partition.domain_polygon)

    area0 = np.sqrt(3.0) / 4.0 * h_target**2
    segments = g.segments(max_length=h_target)
    pslg = {
        "vertices": np.asarray(g.vertices),
        "segments": segments,
        "regions": np.array([[x, y, a, 0.0] for x, y, a in regions]),
    }
    t = triangle.triangulate(pslg, f"pq{min_angle:g}a{area0:.17g}AQ")
    t = _cap_edges(t, h_target, min_angle)
    for center, radius in refine_near or []:
        t = _refine_disk(t, np.asarray(center, float), float(radius), h_target / 8.0, min_angle)

    labels = np.rint(t["triangle_attributes"].ravel() - _ATTR_SHIFT).astype(int)
    mesh = Mesh(t["vertices"], t["triangles"], labels, partition=partition)
    if not use_ext:
        tag_sigma(mesh, partition)
    return mesh


def _cap_edges(t, h_max, min_angle, max_rounds=30):
    for _ in range(max_rounds):
        c = t["vertices"][t["triangles"]]
        longest = np.linalg.norm(c - np.roll(c, 1, axis=1), axis=2).max(axis=1)
        bad = longest > h_max
        if not bad.any():
            return t
        area = 0.5 * np.abs(_cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]))
        t = dict(t)
        t["triangle_max_area"] = np.where(bad, 0.5 * area, -1.0)
        t = triangle.triangulate(t, f"rpq{min_angle:g}aAQ")
    raise MeshError("could not bring every edge below the target length")


def _refine_disk(t, center, radius, h_fine, min_angle, max_rounds=20):
    target_area = np.sqrt(3.0) / 4.0 * h_fine**2 * 0.5
    for _ in range(max_rounds):
        c = t["vertices"][t["triangles"]]
        e = np.linalg.norm(c - np.roll(c, 1, axis=1), axis=2)
        mid = 0.5 * (c + np.roll(c, 1, axis=1))
        near = np.linalg.norm(mid - center, axis=2) <= radius
        if not np.any(e[near] > h_fine):
            return t
        centroid = c.mean(axis=1)
        hit = np.linalg.norm(centroid - center, axis=1) <= radius + e.max(axis=1)
        max_area = np.full(len(c), -1.0)
        max_area[hit] = target_area
        t = dict(t)
        t["triangle_max_area"] = max_area
        t = triangle.triangulate(t, f"rpq{min_angle:g}aAQ")
    raise MeshError("local refinement did not reach the requested edge length")


def write_mesh(mesh: Mesh, path: str | Path) -> None:
    """Plain-text node/element format: node lines ``x y``, element lines ``a b c label``."""
    lines = [f"nodes {mesh.n_nodes}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.nodes]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{a} {b} {c} {lab}" for (a, b, c), lab in zip(mesh.triangles, mesh.labels)]
    lines.append(f"sigma {len(mesh.sigma_nodes)}")
    lines += [f"{i} {s:.17g}" for i, s in zip(mesh.sigma_nodes, mesh.sigma_coords)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path: str | Path, partition: Partition | None = None) -> Mesh:
    rows = Path(path).read_text().split("\n")
    n = int(rows[0].split()[1])
    nodes = np.array([[float(v) for v in r.split()] for r in rows[1 : 1 + n]])
    m = int(rows[1 + n].split()[1])
    el = np.array([[int(v) for v in r.split()] for r in rows[2 + n : 2 + n + m]], dtype=int)
    mesh = Mesh(nodes, el[:, :3], el[:, 3], partition=partition)
    k = int(rows[2 + n + m].split()[1])
    if k:
        sig = np.array([r.split() for r in rows[3 + n + m : 3 + n + m + k]])
        mesh.sigma_nodes = sig[:, 0].astype(int)
        mesh.sigma_coords = sig[:, 1].astype(float)
    return mesh


def check_alignment(mesh: Mesh) -> bool:
    """Every triangle centroid lies in exactly the cell its label names."""
    if mesh.partition is None:
        raise GeometryError("mesh carries no partition")
    cells = mesh.partition.locate_cell(mesh.centroids)
    expected = np.where(mesh.labels >= 0, mesh.labels, -1)
    return bool(np.all(cells == expected))
