import csv
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtnlab.dtn import assemble_dtn, operator_norm
from dtnlab.geometry import build_grid_partition
from dtnlab.inverse import (
    AdmissibleClass,
    ForwardMap,
    InverseError,
    ReconstructionDiverged,
    ReconstructionProblem,
    add_operator_noise,
    estimate_lipschitz_constant,
    forward_map,
    jacobian,
    lattice_members,
    reconstruct,
    rondi_lower_bound,
    stability_ratio,
    write_records,
)
from dtnlab.mesh import Mesh, make_mesh

TRUTH = np.array([0.7 + 0.1j, 1.3 - 0.05j, 0.9, 1.2 + 0.2j])


@pytest.fixture(scope="module")
def disk_forward(disk2_mesh):
    return ForwardMap(disk2_mesh)


@pytest.mark.parametrize("N", [1, 2, 4])
def test_lattice_enumeration(N):
    members = lattice_members(N)
    assert members.shape == (3**N, N)
    assert len({tuple(m) for m in members}) == 3**N
    cls = AdmissibleClass("lattice", N)
    assert cls.cardinality == 3**N
    assert all(cls.contains(m) for m in members)
    dist = np.abs(members[:, None, :] - members[None, :, :]).max(axis=2)
    off = dist[~np.eye(len(members), dtype=bool)]
    assert off.min() == 0.5 and off.max() == 1.0


def test_admissible_class_membership():
    assert AdmissibleClass("box", 3).contains([0.7, 0.7, 0.7])
    assert not AdmissibleClass("box", 3).contains([0.7, 0.8, 0.7])
    assert AdmissibleClass("grid", 3).contains([0.7, 0.8, 1.5])
    assert not AdmissibleClass("grid", 3).contains([0.7, 0.8, 1.6])
    assert not AdmissibleClass("lattice", 2).contains([0.5, 1.0 + 1e-3j])
    with pytest.raises(ValueError):
        AdmissibleClass("cloud", 2)


def test_forward_map_matches_direct_assembly(square2, square2_omega_mesh):
    q = np.array([1.0, 0.5 + 0.2j, 1.5, 0.9])
    direct = assemble_dtn(square2_omega_mesh, q).matrix
    assert np.array_equal(forward_map(square2, square2_omega_mesh, q).matrix, direct)


def test_forward_map_continuity(disk_forward):
    q = np.ones(4, dtype=complex)
    base = disk_forward(q).matrix
    diffs = []
    for eps in (1e-2, 1e-3, 1e-4):
        diffs.append(operator_norm(disk_forward(q + eps).matrix - base, disk_forward.basis))
    assert diffs[0] / diffs[1] == pytest.approx(10, rel=0.05)
    assert diffs[1] / diffs[2] == pytest.approx(10, rel=0.05)


@settings(max_examples=10, deadline=None)
@given(st.lists(st.sampled_from([0.5, 1.0, 1.5]), min_size=4, max_size=4),
       st.lists(st.sampled_from([0.5, 1.0, 1.5]), min_size=4, max_size=4))
def test_forward_map_injective_on_lattice(disk_forward, a, b):
    if a == b:
        return
    fm = disk_forward
    assert operator_norm(fm(a).matrix - fm(b).matrix, fm.basis) > 1e-6


@pytest.mark.parametrize("q", [np.ones(4), TRUTH])
def test_jacobian_matches_finite_differences(disk_forward, q):
    q = np.asarray(q, dtype=complex)
    J = disk_forward.jacobian(q)
    step = 1e-5
    for j in range(4):
        e = np.zeros(4)
        e[j] = step
        fd = (disk_forward(q + e).matrix - disk_forward(q - e).matrix) / (2 * step)
        # central differences of a smooth map; round-off ~ 1e-16 / step
        assert np.abs(fd - J[j]).max() <= 1e-6 * np.abs(J[j]).max()


def test_jacobian_complex_direction(disk_forward):
    q = TRUTH.copy()
    J = disk_forward.jacobian(q)
    step = 1e-5
    e = np.zeros(4, dtype=complex)
    e[2] = 1j * step
    fd = (disk_forward(q + e).matrix - disk_forward(q - e).matrix) / (2 * step)
    # holomorphic in q: an imaginary step gives i J
    assert np.abs(fd - 1j * J[2]).max() <= 1e-6 * np.abs(J[2]).max()


def test_jacobian_module_function(square2, square2_omega_mesh):
    q = np.ones(4)
    J = jacobian(square2, square2_omega_mesh, q)
    assert J.shape[0] == 4
    assert np.allclose(J, np.transpose(J, (0, 2, 1)))


def test_jacobian_far_cell_is_small():
    part = build_grid_partition(4, sigma="cell")
    mesh = make_mesh(part, 0.0625, extension=False)
    J = ForwardMap(mesh).jacobian(np.full(16, 400.0))
    near, far = np.abs(J[0]).max(), np.abs(J[15]).max()
    # waves decay like exp(-20 d); cell 15 is at distance ~1 from Sigma
    assert far < 1e-8 * near


def test_permutation_equivariance(square2, square2_omega_mesh):
    perm = np.array([2, 0, 3, 1])
    m = square2_omega_mesh
    relabeled = Mesh(m.nodes, m.triangles, perm[m.labels], m.partition, m.parent_nodes, m.sigma_nodes, m.sigma_coords)
    q = np.array([0.6, 1.1 + 0.3j, 1.4, 0.8 - 0.1j])
    q_new = np.empty_like(q)
    q_new[perm] = q
    a = assemble_dtn(m, q).matrix
    b = assemble_dtn(relabeled, q_new).matrix
    assert np.abs(a - b).max() <= 1e-12 * np.abs(a).max()


def test_reconstruction_at_truth_stops_immediately(disk_forward):
    problem = ReconstructionProblem(disk_forward, disk_forward(TRUTH), TRUTH, truth=TRUTH)
    result = reconstruct(problem)
    assert result.converged
    assert len(result.trace) == 1
    assert np.array_equal(result.estimate, TRUTH)


def test_inverse_crime_gauss_newton(tmp_path, disk_forward):
    problem = ReconstructionProblem(disk_forward, disk_forward(TRUTH), np.ones(4), truth=TRUTH)
    result = reconstruct(problem, "gauss_newton")
    assert result.converged
    assert len(result.trace) <= 50
    assert np.abs(result.estimate - TRUTH).max() <= 1e-8
    misfits = [row.misfit for row in result.trace]
    assert misfits[-1] < 1e-10 * misfits[0]
    result.write_trace(tmp_path / "trace.csv")
    with open(tmp_path / "trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "misfit", "step", "error_if_known"]
    assert len(rows) == len(result.trace) + 1


def test_landweber_decreases_misfit(disk_forward):
    problem = ReconstructionProblem(disk_forward, disk_forward(TRUTH), np.ones(4), truth=TRUTH, max_iter=40)
    result = reconstruct(problem, "landweber")
    misfits = np.array([row.misfit for row in result.trace])
    assert misfits[-1] < 0.5 * misfits[0]
    assert np.abs(result.estimate - TRUTH).max() < np.abs(np.ones(4) - TRUTH).max()


def test_unknown_method(disk_forward):
    problem = ReconstructionProblem(disk_forward, disk_forward(TRUTH), np.ones(4))
    with pytest.raises(ValueError):
        reconstruct(problem, "newton_raphson")


class UphillForward(ForwardMap):
    def jacobian(self, q):
        return -super().jacobian(q)


@pytest.mark.parametrize("method", ["gauss_newton", "landweber"])
def test_divergence_is_reported(disk2_mesh, method):
    # a sign-flipped derivative points every trial step uphill
    fm = UphillForward(disk2_mesh)
    problem = ReconstructionProblem(fm, fm(TRUTH), np.ones(4), max_iter=30)
    with pytest.raises(ReconstructionDiverged) as info:
        reconstruct(problem, method)
    assert len(info.value.trace) >= 1


def test_noise_level_has_requested_norm(disk_forward):
    op = disk_forward(np.ones(4))
    rng = np.random.default_rng(3)
    noisy = add_operator_noise(op, 1e-3, rng)
    assert operator_norm(noisy.matrix - op.matrix, disk_forward.basis) == pytest.approx(1e-3, rel=1e-9)
    assert np.allclose(noisy.matrix, noisy.matrix.T)


@pytest.mark.parametrize("seed", [0, 1])
def test_noisy_reconstruction_within_lipschitz_bound(disk_forward, seed):
    delta = 1e-3
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    measured = add_operator_noise(disk_forward(TRUTH), delta, rng)
    problem = ReconstructionProblem(disk_forward, measured, np.ones(4), noise_level=delta, truth=TRUTH)
    result = reconstruct(problem)
    # the exhaustive lattice constant on this mesh is ~69
    assert np.abs(result.estimate - TRUTH).max() <= 69 * delta


def test_stability_ratio(disk2_mesh, disk_forward):
    q1 = np.ones(4)
    q2 = q1.copy()
    q2[0] = 1.5
    rec = stability_ratio(q1, q2, disk2_mesh, forward=disk_forward)
    assert rec.distance == 0.5
    assert rec.ratio == pytest.approx(0.5 / rec.dtn_norm)
    with pytest.raises(InverseError):
        stability_ratio(q1, q1, disk2_mesh, forward=disk_forward)


def test_deep_cell_is_less_stable():
    part = build_grid_partition(3, "disk")
    mesh = make_mesh(part, 0.1, extension=False)
    fm = ForwardMap(mesh)
    base = np.ones(9)

    def ratio(cell):
        q = base.copy()
        q[cell] = 1.5
        return stability_ratio(base, q, mesh, forward=fm).ratio

    # cell 4 is the center of the 3x3 cube, cell 0 a corner
    assert ratio(4) > ratio(0)


def test_lipschitz_constant_N1(disk_forward):
    part = build_grid_partition(1, "disk")
    fm = ForwardMap(make_mesh(part, 0.1, extension=False))
    est = estimate_lipschitz_constant(fm)
    assert len(est.records) == 3
    assert est.complete and not est.is_lower_bound
    assert est.C_est == max(r.ratio for r in est.records)


def test_lipschitz_constant_N4_symmetry(tmp_path, disk_forward):
    est = estimate_lipschitz_constant(disk_forward)
    assert len(est.records) == 81 * 80 // 2
    members = lattice_members(4)
    # cells in lexicographic order (column-major cube index) on a square lattice symmetric under D4
    a, b = est.argmax[0]
    pair = {tuple(members[a]), tuple(members[b])}
    rot = [1, 3, 0, 2]
    rotated = {tuple(np.asarray(m)[rot]) for m in pair}
    rotated_ratio = [r.ratio for r in est.records if {tuple(r.q1), tuple(r.q2)} == rotated]
    assert rotated_ratio and rotated_ratio[0] == pytest.approx(est.C_est, rel=0.05)
    write_records(est.records[:5], tmp_path / "r.csv", seed=7)
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["N", "distance", "dtn_norm", "ratio", "mesh_h", "seed"]
    assert rows[1][-1] == "7"


def test_lipschitz_random_sampling_is_lower_bound(disk_forward):
    est = estimate_lipschitz_constant(disk_forward, "random", 20, rng=np.random.default_rng(0))
    full = estimate_lipschitz_constant(disk_forward)
    assert est.is_lower_bound
    assert est.C_est <= full.C_est * (1 + 1e-12)


def rondi_reference(N, n=2, K=1):
    mpmath.mp.dps = 30
    p = mpmath.mpf(1) / (2 * n - 1)
    return float(mpmath.exp((mpmath.log(3) / K) ** p * mpmath.mpf(N) ** p) / 4)


@pytest.mark.parametrize("N", [1, 4, 8, 27, 100])
def test_rondi_bound_closed_form(N):
    assert rondi_lower_bound(N).bound == pytest.approx(rondi_reference(N), rel=1e-12)


def test_rondi_bound_reference_value():
    b = rondi_lower_bound(8)
    assert b.K1 == pytest.approx(1.0318458, abs=1e-7)
    assert b.bound == pytest.approx(1.968747, abs=1e-6)


@settings(max_examples=30)
@given(st.floats(1, 1e6), st.integers(2, 5), st.floats(0.1, 10))
def test_rondi_net_identity(N, n, K):
    b = rondi_lower_bound(N, n, K)
    # at eps0 the net has exactly 3^N points
    assert b.log_net_cardinality(b.eps0) == pytest.approx(N * math.log(3), rel=1e-9)
    assert rondi_lower_bound(N * 2, n, K).bound > b.bound


def test_rondi_bound_errors():
    for args in [(0,), (4, 1), (4, 2, 0.0)]:
        with pytest.raises(ValueError):
            rondi_lower_bound(*args)
