"""Triangle quadrature rules, singularity-aware subdivision and point location."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

# interior 3-point rule, exact for quadratics
GAUSS3_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
GAUSS3_W = np.full(3, 1 / 3)

# Dunavant degree-5 rule
_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
GAUSS7_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_a1, _b1, _b1],
        [_b1, _a1, _b1],
        [_b1, _b1, _a1],
        [_a2, _b2, _b2],
        [_b2, _a2, _b2],
        [_b2, _b2, _a2],
    ]
)
GAUSS7_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)

# corner barycentrics of the four children of the reference triangle
_CHILDREN = np.array(
    [
        [[1, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0.5]],
        [[0.5, 0.5, 0], [0, 1, 0], [0, 0.5, 0.5]],
        [[0.5, 0, 0.5], [0, 0.5, 0.5], [0, 0, 1]],
        [[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]],
    ]
)


def triangle_areas(corners: np.ndarray) -> np.ndarray:
    """Unsigned areas of triangles given as (..., 3, 2) corner arrays."""
    d1 = corners[..., 1, :] - corners[..., 0, :]
    d2 = corners[..., 2, :] - corners[..., 0, :]
    return 0.5 * np.abs(d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0])


def _point_triangle_distance(corners: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Lower bound of the distance from ``p`` to each triangle (0 if inside)."""
    centroid = corners.mean(axis=1)
    radius = np.max(np.linalg.norm(corners - centroid[:, None, :], axis=2), axis=1)
    return np.maximum(np.linalg.norm(centroid - p, axis=1) - radius, 0.0)


def subdivided_rule(
    corners: np.ndarray,
    singular_points: np.ndarray | None = None,
    *,
    ratio: float = 0.5,
    max_depth: int = 10,
    min_depth: int = 0,
    rule: str = "gauss3",
    circles=(),
    circle_depth: int | None = None,
):
    """Quadrature on triangles, refined recursively near singular points.

    A child triangle is split again while its diameter exceeds
    ``ratio * dist(singular point, child)`` and ``max_depth`` is not reached.
    Children that may cross one of the ``circles`` (pairs of center and
    radius) are split up to ``circle_depth`` so that indicator functions of
    disks are resolved.

    Returns
    -------
    points : (P, 2) array
    weights : (P,) array
        Physical weights (areas included).
    parent : (P,) int array
        Index of the input triangle each point belongs to.
    bary : (P, 3) array
        Barycentric coordinates of each point in its parent triangle.
    """
    corners = np.asarray(corners, dtype=float)
    bary_rule, w_rule = (GAUSS3_BARY, GAUSS3_W) if rule == "gauss3" else (GAUSS7_BARY, GAUSS7_W)
    sing = np.zeros((0, 2)) if singular_points is None else np.atleast_2d(singular_points)
    # live sub-triangles: parent id and the barycentric corners within the parent
    parent = np.arange(len(corners))
    sub = np.broadcast_to(np.eye(3), (len(corners), 3, 3)).copy()
    done_parent, done_sub = [], []
    for depth in range(max_depth + 1):
        if len(parent) == 0:
            break
        phys = sub @ corners[parent]
        split = np.zeros(len(parent), dtype=bool)
        if depth < min_depth:
            split[:] = True
        else:
            diam = np.max(np.linalg.norm(phys - np.roll(phys, 1, axis=1), axis=2), axis=1)
            if depth < max_depth:
                for s in sing:
                    split |= diam > ratio * _point_triangle_distance(phys, s)
            if depth < (max_depth if circle_depth is None else circle_depth):
                centroid = phys.mean(axis=1)
                reach = np.max(np.linalg.norm(phys - centroid[:, None, :], axis=2), axis=1)
                for c, rad in circles:
                    split |= np.abs(np.linalg.norm(centroid - np.asarray(c), axis=1) - rad) <= reach
        done_parent.append(parent[~split])
        done_sub.append(sub[~split])
        if not split.any():
            break
        parent = np.repeat(parent[split], 4)
        sub = (_CHILDREN[None] @ sub[split][:, None]).reshape(-1, 3, 3)
    parent = np.concatenate(done_parent)
    sub = np.concatenate(done_sub)
    bary = bary_rule[None] @ sub  # (T, q, 3) in parent coordinates
    phys_corners = sub @ corners[parent]
    weights = triangle_areas(phys_corners)[:, None] * w_rule[None, :]
    points = bary @ corners[parent]
    nq = len(w_rule)
    return points.reshape(-1, 2), weights.reshape(-1), np.repeat(parent, nq), bary.reshape(-1, 3)


class PointLocator:
    """Find the triangle and barycentric coordinates of arbitrary points."""

    def __init__(self, nodes: np.ndarray, triangles: np.ndarray, k: int = 16):
        self.nodes = nodes
        self.triangles = triangles
        self.corners = nodes[triangles]
        self.tree = cKDTree(self.corners.mean(axis=1))
        self.k = min(k, len(triangles))
        a, b, c = self.corners[:, 0], self.corners[:, 1], self.corners[:, 2]
        self._T = np.stack([b - a, c - a], axis=2)  # (m, 2, 2)
        self._Tinv = np.linalg.inv(self._T)

    def _bary(self, tri, p):
        lam = np.einsum("...ij,...j->...i", self._Tinv[tri], p - self.corners[tri, 0])
        return np.concatenate([1.0 - lam.sum(axis=-1, keepdims=True), lam], axis=-1)

    def locate(self, points: np.ndarray, tol: float = 1e-10):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        tri = np.full(len(points), -1)
        bary = np.zeros((len(points), 3))
        _, cand = self.tree.query(points, k=self.k)
        cand = np.atleast_2d(cand).reshape(len(points), -1)
        for col in range(cand.shape[1]):
            todo = np.flatnonzero(tri < 0)
            if len(todo) == 0:
                break
            t = cand[todo, col]
            b = self._bary(t, points[todo])
            ok = np.all(b >= -tol, axis=1)
            tri[todo[ok]] = t[ok]
            bary[todo[ok]] = b[ok]
        for i in np.flatnonzero(tri < 0):
            b = self._bary(np.arange(len(self.triangles)), np.broadcast_to(points[i], (len(self.triangles), 2)))
            best = int(np.argmax(b.min(axis=1)))
            if b[best].min() >= -tol:
                tri[i], bary[i] = best, b[best]
        return tri, bary

    def interpolate(self, values: np.ndarray, points: np.ndarray, outside=np.nan) -> np.ndarray:
        tri, bary = self.locate(points)
        out = np.full(len(tri), outside, dtype=np.result_type(values, float))
        ok = tri >= 0
        out[ok] = np.einsum("pi,pi->p", values[self.triangles[tri[ok]]], bary[ok])
        return out
