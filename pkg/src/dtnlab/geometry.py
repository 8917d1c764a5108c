"""Polygonal domains, grid partitions, chains of cells and potentials.

Cells are indexed from 0, so ``D_1`` of the analysis is cell 0.  Grid cells
follow the lexicographic order on ``(j1, j2)``: the index of cell
``(j1, j2)`` (1-based grid coordinates) is ``(j1 - 1) * n + (j2 - 1)``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DISK_SIDES = 128
_TOL = 1e-12


class GeometryError(ValueError):
    """Raised for invalid partitions or chain queries."""


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise vertices)."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_edges(poly: np.ndarray) -> np.ndarray:
    return np.stack([poly, np.roll(poly, -1, axis=0)], axis=1)


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points ``p`` (..., 2) to the segment ``[a, b]``."""
    p = np.asarray(p, dtype=float)
    d = b - a
    t = np.clip(((p - a) @ d) / float(d @ d), 0.0, 1.0)
    proj = a + t[..., None] * d
    return np.linalg.norm(p - proj, axis=-1)


def point_polyline_distance(p: np.ndarray, line: np.ndarray, closed: bool = False) -> np.ndarray:
    segs = polygon_edges(line) if closed else np.stack([line[:-1], line[1:]], axis=1)
    p = np.asarray(p, dtype=float)
    return np.min([point_segment_distance(p, a, b) for a, b in segs], axis=0)


def points_in_polygon(p: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule; points on the boundary may go either way."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    inside = np.zeros(len(p), dtype=bool)
    x, y = p[:, 0], p[:, 1]
    for (x0, y0), (x1, y1) in polygon_edges(poly):
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < xc)
    return inside


def shared_segments(a: np.ndarray, b: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Collinear overlaps of positive length between the boundaries of two polygons."""
    out = []
    for p0, p1 in polygon_edges(a):
        d = p1 - p0
        length = float(np.hypot(*d))
        u = d / length
        for q0, q1 in polygon_edges(b):
            # both endpoints of the other edge must lie on the line through p0, p1
            c0 = u[0] * (q0 - p0)[1] - u[1] * (q0 - p0)[0]
            c1 = u[0] * (q1 - p0)[1] - u[1] * (q1 - p0)[0]
            if abs(c0) > _TOL or abs(c1) > _TOL:
                continue
            t0, t1 = sorted((float((q0 - p0) @ u), float((q1 - p0) @ u)))
            lo, hi = max(t0, 0.0), min(t1, length)
            if hi - lo > _TOL:
                out.append((p0 + lo * u, p0 + hi * u))
    return out


@dataclass(frozen=True)
class FixedRegion:
    """Part of the domain where the potential is known (e.g. ``q = 1`` outside the cube)."""

    outer: np.ndarray
    holes: tuple[np.ndarray, ...] = ()
    value: complex = 1.0
    seed: tuple[float, float] | None = None

    @property
    def area(self) -> float:
        return abs(polygon_area(self.outer)) - sum(abs(polygon_area(h)) for h in self.holes)


@dataclass(frozen=True)
class Chain:
    """Cells ``indices[0] = 0, ..., indices[-1] = target`` with crossing points between them."""

    indices: tuple[int, ...]
    crossing_points: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class Partition:
    domain_polygon: np.ndarray
    subdomains: tuple[np.ndarray, ...]
    sigma: np.ndarray
    sigma_closed: bool
    extension_cell: np.ndarray | None
    interface_points: dict
    r0: float
    L: float
    A: float
    fixed_regions: tuple[FixedRegion, ...] = ()
    sigma1: np.ndarray | None = None
    side_cells: int = 0
    domain_kind: str = "unit_square"
    adjacency: tuple[tuple[int, ...], ...] = field(default=(), repr=False)

    @property
    def n_cells(self) -> int:
        return len(self.subdomains)

    @property
    def r1(self) -> float:
        return self.r0 / 16.0

    @property
    def sigma_edges(self) -> np.ndarray:
        s = self.sigma
        return polygon_edges(s) if self.sigma_closed else np.stack([s[:-1], s[1:]], axis=1)

    @property
    def sigma_length(self) -> float:
        e = self.sigma_edges
        return float(np.sum(np.linalg.norm(e[:, 1] - e[:, 0], axis=1)))

    def cell_area(self, j: int) -> float:
        return abs(polygon_area(self.subdomains[j]))

    def cell_centroid(self, j: int) -> np.ndarray:
        return self.subdomains[j].mean(axis=0)

    def coverage_defect(self) -> float:
        """Relative mismatch between the summed region areas and the domain area."""
        total = sum(self.cell_area(j) for j in range(self.n_cells))
        total += sum(r.area for r in self.fixed_regions)
        dom = abs(polygon_area(self.domain_polygon))
        return abs(total - dom) / dom

    def locate_cell(self, points: np.ndarray) -> np.ndarray:
        """Cell index per point; -1 outside all unknown cells."""
        points = np.atleast_2d(points)
        out = np.full(len(points), -1)
        for j, poly in enumerate(self.subdomains):
            out[(out < 0) & points_in_polygon(points, poly)] = j
        return out

    def shared_boundary(self, j: int, k: int) -> list[tuple[np.ndarray, np.ndarray]]:
        return shared_segments(self.subdomains[j], self.subdomains[k])

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "domain_kind": self.domain_kind,
            "side_cells": self.side_cells,
            "domain_polygon": arr(self.domain_polygon),
            "subdomains": [arr(c) for c in self.subdomains],
            "sigma": arr(self.sigma),
            "sigma_closed": self.sigma_closed,
            "sigma_edges": arr(self.sigma_edges),
            "sigma1": arr(self.sigma1),
            "extension_cell": arr(self.extension_cell),
            "interface_points": [[j, k, list(map(float, p))] for (j, k), p in sorted(self.interface_points.items())],
            "fixed_regions": [
                {
                    "outer": arr(r.outer),
                    "holes": [arr(h) for h in r.holes],
                    "value": [float(np.real(r.value)), float(np.imag(r.value))],
                    "seed": None if r.seed is None else list(r.seed),
                }
                for r in self.fixed_regions
            ],
            "geometry_params": {"r0": self.r0, "L": self.L, "A": self.A},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)

        cells = tuple(arr(c) for c in d["subdomains"])
        fixed = tuple(
            FixedRegion(
                outer=arr(r["outer"]),
                holes=tuple(arr(h) for h in r["holes"]),
                value=complex(*r["value"]),
                seed=None if r["seed"] is None else tuple(r["seed"]),
            )
            for r in d["fixed_regions"]
        )
        gp = d["geometry_params"]
        return cls(
            domain_polygon=arr(d["domain_polygon"]),
            subdomains=cells,
            sigma=arr(d["sigma"]),
            sigma_closed=bool(d["sigma_closed"]),
            extension_cell=arr(d["extension_cell"]),
            interface_points={(int(j), int(k)): np.asarray(p) for j, k, p in d["interface_points"]},
            r0=gp["r0"],
            L=gp["L"],
            A=gp["A"],
            fixed_regions=fixed,
            sigma1=arr(d["sigma1"]),
            side_cells=int(d["side_cells"]),
            domain_kind=d["domain_kind"],
            adjacency=_adjacency(cells),
        )


def save_partition(partition: Partition, path: str | Path) -> None:
    Path(path).write_text(json.dumps(partition.to_dict(), indent=1))


def load_partition(path: str | Path) -> Partition:
    return Partition.from_dict(json.loads(Path(path).read_text()))


def _adjacency(cells) -> tuple[tuple[int, ...], ...]:
    n = len(cells)
    nbrs = [[] for _ in range(n)]
    for j in range(n):
        for k in range(j + 1, n):
            if shared_segments(cells[j], cells[k]):
                nbrs[j].append(k)
                nbrs[k].append(j)
    return tuple(tuple(v) for v in nbrs)


def _interface_points(cells, adjacency) -> dict:
    pts = {}
    for j, nb in enumerate(adjacency):
        for k in nb:
            if k <= j:
                continue
            segs = shared_segments(cells[j], cells[k])
            a, b = max(segs, key=lambda s: np.hypot(*(s[1] - s[0])))
            pts[(j, k)] = 0.5 * (a + b)
    return pts


def _square(x0, y0, x1, y1) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def _extension_box(sigma1: np.ndarray, r0: float) -> np.ndarray:
    """Rectangle of width 4 r0/3 and depth 2 r0/3 glued outside the midpoint of a flat Sigma_1."""
    a, b = sigma1[0], sigma1[-1]
    t = (b - a) / np.hypot(*(b - a))
    nu = np.array([t[1], -t[0]])  # outward for a counter-clockwise boundary
    mid = 0.5 * (a + b)
    w, d = 2.0 * r0 / 3.0, 2.0 * r0 / 3.0
    return np.array([mid - w * t, mid + w * t, mid + w * t + d * nu, mid - w * t + d * nu])[::-1].copy()


def build_grid_partition(
    side_cells: int,
    domain_spec: str = "unit_square",
    *,
    sigma: str | None = None,
    n_active: int | None = None,
    L: float = 1.0,
    A: float | None = None,
    disk_sides: int = DISK_SIDES,
    radius: float = 1.0,
    background: complex = 1.0,
) -> Partition:
    """Build a grid partition of the unit square or of the cube inside a polygonal disk.

    Parameters
    ----------
    side_cells : int
        Number of cells per side; the partition has ``side_cells**2`` cells
        (or ``n_active`` of them for the disk, the rest being fixed at ``q = 1``).
    domain_spec : {"unit_square", "disk"}
        ``"disk"`` is the regular ``disk_sides``-gon of the given circumradius
        containing the cube ``[-1/2, 1/2]^2``; everything outside the active
        cells carries the fixed potential ``background`` (1 by default).
    sigma : {"bottom", "cell", "full"}, optional
        Accessible boundary portion.  Defaults to ``"bottom"`` for the square
        and ``"full"`` for the disk.  ``"cell"`` restricts Sigma to the bottom
        side of cell 0.
    """
    if int(side_cells) != side_cells or side_cells < 1:
        raise GeometryError(f"side_cells must be a positive integer, got {side_cells!r}")
    n = int(side_cells)
    if domain_spec == "unit_square":
        return _square_partition(n, sigma or "bottom", L, A)
    if domain_spec == "disk":
        return _disk_partition(n, sigma or "full", n_active, L, A, disk_sides, radius, background)
    raise GeometryError(f"unknown domain_spec {domain_spec!r}")


def _square_partition(n, sigma, L, A) -> Partition:
    h = 1.0 / n
    cells = []
    for j1 in range(n):
        for j2 in range(n):
            cells.append(_square(j1 * h, j2 * h, (j1 + 1) * h, (j2 + 1) * h))
    domain = _square(0.0, 0.0, 1.0, 1.0)
    sigma1 = np.array([[0.0, 0.0], [h, 0.0]])
    if sigma == "bottom":
        sig, closed = np.array([[0.0, 0.0], [1.0, 0.0]]), False
    elif sigma == "cell":
        sig, closed = sigma1.copy(), False
    elif sigma == "full":
        sig, closed = domain.copy(), True
    else:
        raise GeometryError(f"unknown sigma option {sigma!r}")
    r0 = float(np.hypot(*(sigma1[1] - sigma1[0]))) / 4.0
    cells = tuple(cells)
    adj = _adjacency(cells)
    return Partition(
        domain_polygon=domain,
        subdomains=cells,
        sigma=sig,
        sigma_closed=closed,
        extension_cell=_extension_box(sigma1, r0),
        interface_points=_interface_points(cells, adj),
        r0=r0,
        L=L,
        A=1.0 if A is None else A,
        sigma1=sigma1,
        side_cells=n,
        domain_kind="unit_square",
        adjacency=adj,
    )


def _disk_partition(n, sigma, n_active, L, A, sides, radius, background) -> Partition:
    theta = 2.0 * np.pi * np.arange(sides) / sides
    domain = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    inradius = radius * np.cos(np.pi / sides)
    if np.hypot(0.5, 0.5) >= inradius:
        raise GeometryError("disk polygon too small to host the cube [-1/2, 1/2]^2")
    total = n * n
    n_active = total if n_active is None else int(n_active)
    if not 1 <= n_active <= total:
        raise GeometryError(f"n_active must lie in [1, {total}]")
    h = 1.0 / n
    cubes = []
    for j1 in range(n):
        for j2 in range(n):
            cubes.append(_square(-0.5 + j1 * h, -0.5 + j2 * h, -0.5 + (j1 + 1) * h, -0.5 + (j2 + 1) * h))
    cells = tuple(cubes[:n_active])
    cube = _square(-0.5, -0.5, 0.5, 0.5)
    seed_r = 0.5 * (np.sqrt(0.5) + inradius)
    seed = (seed_r * np.cos(0.3), seed_r * np.sin(0.3))
    fixed = [FixedRegion(outer=domain, holes=(cube,), value=complex(background), seed=seed)]
    for c in cubes[n_active:]:
        fixed.append(FixedRegion(outer=c, value=complex(background), seed=tuple(c.mean(axis=0))))
    if sigma != "full":
        raise GeometryError("the disk partition supports only sigma='full'")
    adj = _adjacency(cells)
    return Partition(
        domain_polygon=domain,
        subdomains=cells,
        sigma=domain.copy(),
        sigma_closed=True,
        extension_cell=None,
        interface_points=_interface_points(cells, adj),
        r0=2.0 * sides * radius * np.sin(np.pi / sides) / 4.0,
        L=L,
        A=abs(polygon_area(domain)) if A is None else A,
        fixed_regions=tuple(fixed),
        side_cells=n,
        domain_kind="disk",
        adjacency=adj,
    )


def chain_to(partition: Partition, target: int) -> Chain:
    """Shortest chain of edge-adjacent cells from cell 0 to ``target``.

    Ties are broken towards lower cell indices, so the result is
    deterministic.  The crossing point between consecutive cells is the
    midpoint of their longest shared edge.
    """
    n = partition.n_cells
    if not 0 <= target < n:
        raise GeometryError(f"target {target} outside [0, {n})")
    prev = {0: None}
    queue = deque([0])
    while queue:
        j = queue.popleft()
        if j == target:
            break
        for k in sorted(partition.adjacency[j]):
            if k not in prev:
                prev[k] = j
                queue.append(k)
    if target not in prev:
        raise GeometryError(f"cell {target} is not connected to cell 0; the partition has no chain to it")
    path = [target]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    path.reverse()
    crossings = []
    for a, b in zip(path[:-1], path[1:]):
        key = (min(a, b), max(a, b))
        crossings.append(np.asarray(partition.interface_points[key]))
    return Chain(indices=tuple(path), crossing_points=tuple(crossings))


def interface_normal(partition: Partition, inner: int, outer: int) -> np.ndarray:
    """Unit normal to the longest shared edge, pointing out of ``inner`` into ``outer``."""
    segs = partition.shared_boundary(inner, outer)
    if not segs:
        raise GeometryError(f"cells {inner} and {outer} are not adjacent")
    a, b = max(segs, key=lambda s: np.hypot(*(s[1] - s[0])))
    t = (b - a) / np.hypot(*(b - a))
    nu = np.array([t[1], -t[0]])
    mid = 0.5 * (a + b)
    if np.dot(partition.cell_centroid(inner) - mid, nu) > 0:
        nu = -nu
    return nu


@dataclass(frozen=True, eq=False)
class Potential:
    """Piecewise constant complex potential ``q = sum_j q_j chi_{D_j}``.

    The extension cell carries ``q = 1`` and fixed regions carry their own
    value; neither counts towards the sup-norm distance between potentials.
    """

    values: np.ndarray
    B: float | None = None

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=complex)).copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        bound = float(np.max(np.abs(v))) if self.B is None else float(self.B)
        if np.max(np.abs(v)) > bound * (1 + 1e-14):
            raise GeometryError(f"potential exceeds its bound B={bound}")
        object.__setattr__(self, "B", bound)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def key(self) -> tuple:
        return tuple(complex(x) for x in self.values)

    def distance(self, other: "Potential") -> float:
        if len(self) != len(other):
            raise GeometryError("potentials live on different partitions")
        return float(np.max(np.abs(self.values - other.values)))
