import numpy as np
import pytest

from dtnlab.geometry import build_grid_partition, points_in_polygon
from dtnlab.mesh import LABEL_EXTENSION, MeshError, check_alignment, make_mesh, read_mesh, write_mesh


def test_coarse_unit_square():
    mesh = make_mesh(build_grid_partition(1), 0.5, extension=False)
    assert mesh.n_triangles >= 8
    assert check_alignment(mesh)


def test_every_centroid_in_exactly_one_cell(square2):
    mesh = make_mesh(square2, 0.1)
    inside = np.array([points_in_polygon(mesh.centroids, c) for c in square2.subdomains])
    ext = points_in_polygon(mesh.centroids, square2.extension_cell)
    counts = inside.sum(axis=0) + ext
    np.testing.assert_array_equal(counts, 1)
    for j in range(4):
        assert np.all(inside[j][mesh.labels == j])
    assert np.all(ext[mesh.labels == LABEL_EXTENSION])


def test_h_target_respected(square2):
    for h in (0.2, 0.1, 0.05):
        assert make_mesh(square2, h).h <= h * (1 + 1e-12)


def test_refinement_disk_scan(square2):
    center = square2.interface_points[(0, 1)]
    h = 0.1
    mesh = make_mesh(square2, h, [(center, 0.05)])
    # independent scan: every edge with its midpoint in the disk
    e = mesh.edges
    mid = 0.5 * (mesh.nodes[e[:, 0]] + mesh.nodes[e[:, 1]])
    inside = np.linalg.norm(mid - center, axis=1) < 0.05
    lengths = np.linalg.norm(mesh.nodes[e[:, 0]] - mesh.nodes[e[:, 1]], axis=1)
    assert inside.sum() > 20
    assert lengths[inside].max() <= h / 8


def test_rejects_nonpositive_h(square2):
    with pytest.raises(MeshError):
        make_mesh(square2, 0.0)


def test_sigma_tagging_on_omega(square2):
    mesh = make_mesh(square2, 0.1).omega()
    pts = mesh.nodes[mesh.sigma_nodes]
    assert np.all(np.abs(pts[:, 1]) < 1e-12)
    assert np.all((pts[:, 0] > 0) & (pts[:, 0] < 1))
    assert np.all(np.diff(mesh.sigma_coords) > 0)
    assert LABEL_EXTENSION not in mesh.labels


def test_roundtrip(tmp_path, square2_omega_mesh):
    path = tmp_path / "m.txt"
    write_mesh(square2_omega_mesh, path)
    back = read_mesh(path, square2_omega_mesh.partition)
    np.testing.assert_array_equal(back.nodes, square2_omega_mesh.nodes)
    np.testing.assert_array_equal(back.triangles, square2_omega_mesh.triangles)
    np.testing.assert_array_equal(back.labels, square2_omega_mesh.labels)
    np.testing.assert_array_equal(back.sigma_nodes, square2_omega_mesh.sigma_nodes)


def test_orientation_positive(disk2_mesh):
    assert np.all(disk2_mesh.areas > 0)
