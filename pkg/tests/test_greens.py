import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from dtnlab.fem import solve_dirichlet
from dtnlab.geometry import build_grid_partition
from dtnlab.greens import (
    SourcePlacementError,
    UnsupportedDimensionError,
    annulus_l2_norm,
    dipole_kernel,
    greens_field,
    hankel_fundamental,
    kernel_field,
    laplace_fundamental,
    remainder_l2_norm,
    symmetry_defect,
    write_snapshot,
)
from dtnlab.mesh import make_mesh


def spherical_hankel_3_2(x):
    """H^(1)_{3/2}(x) = -sqrt(2x/pi) e^{ix} (x + i) / x^2."""
    return -np.sqrt(2 * x / np.pi) * np.exp(1j * x) * (x + 1j) / x**2


@pytest.fixture(scope="module")
def omega0_mesh():
    part = build_grid_partition(2)
    return make_mesh(part, 0.05, [((0.5, 0.5), 0.05), ((0.3, 0.6), 0.05), ((0.7, 0.3), 0.05)])


@pytest.fixture(scope="module")
def disk_mesh():
    return make_mesh(build_grid_partition(1, "disk"), 0.1)


def test_dipole_plug_in():
    assert dipole_kernel(3, np.array([0.0, 0.0, 1.0]), np.zeros(3)) == pytest.approx(-1 / (4 * np.pi))
    assert dipole_kernel(2, np.array([0.0, 1.0]), np.zeros(2)) == pytest.approx(-1 / (2 * np.pi))


def test_dipole_rejects_coincident_points_and_bad_dimension():
    with pytest.raises(ValueError):
        dipole_kernel(2, np.zeros(2), np.zeros(2))
    with pytest.raises(UnsupportedDimensionError):
        dipole_kernel(4, np.ones(4), np.zeros(4))


def test_dipole_distributional_identity():
    """int Gamma (-Delta phi) dx = -d phi / dx2 (y) for a compactly supported bump."""
    center = np.array([0.1, -0.05])
    R = 0.6
    y = np.array([0.0, 0.0])

    def g(s):
        return np.exp(-1.0 / (1.0 - s)) if s < 1 else 0.0

    def g1(s):
        return -g(s) / (1 - s) ** 2 if s < 1 else 0.0

    def g2(s):
        return g(s) * (1 / (1 - s) ** 4 - 2 / (1 - s) ** 3) if s < 1 else 0.0

    def minus_laplacian(x):
        rho2 = float(np.sum((x - center) ** 2))
        s = rho2 / R**2
        return -(g2(s) * 4 * rho2 / R**4 + 4 * g1(s) / R**2)

    def integrand(rho, theta):
        x = y + rho * np.array([np.cos(theta), np.sin(theta)])
        # Gamma * rho = -sin(theta) / (2 pi): the Jacobian cancels the singularity
        return -np.sin(theta) / (2 * np.pi) * minus_laplacian(x)

    value, _ = integrate.dblquad(integrand, 0, 2 * np.pi, 0, R + np.linalg.norm(center), epsabs=1e-11, epsrel=1e-11)
    s_y = float(np.sum((y - center) ** 2)) / R**2
    d2_phi = g1(s_y) * 2 * (y[1] - center[1]) / R**2
    assert value == pytest.approx(-d2_phi, abs=1e-6)


def test_hankel_n5_against_closed_form_and_mpmath():
    x = np.array([1.0, 0, 0, 0, 0])
    value = hankel_fundamental(5, 1.0, x, np.zeros(5))
    prefactor = 1 / (4j * (2 * np.pi) ** 1.5)
    assert value == pytest.approx(prefactor * spherical_hankel_3_2(1.0), rel=1e-10)
    assert value == pytest.approx(prefactor * complex(mpmath.hankel1(1.5, 1.0)), rel=1e-10)


@pytest.mark.parametrize("n", [4, 6, 7, 9])
def test_hankel_against_mpmath(n):
    q = 1.3 + 0.4j
    r = 0.37
    x = np.zeros(n)
    x[0] = r
    nu = (n - 2) / 2
    s = mpmath.sqrt(q)
    expected = s**nu * mpmath.hankel1(nu, s * r) / (4j * (2 * mpmath.pi) ** nu * r**nu)
    assert hankel_fundamental(n, q, x, np.zeros(n)) == pytest.approx(complex(expected), rel=1e-10)


def test_hankel_n4_leading_singularity_and_log_remainder():
    radii = np.logspace(-1, -4, 7)
    pts = np.zeros((len(radii), 4))
    pts[:, 0] = radii
    H = hankel_fundamental(4, 1.0, pts, np.zeros(4))
    lap = laplace_fundamental(4, pts, np.zeros(4))
    # the leading term cancels; what is left grows only like ln r
    ratio = np.abs(H + lap) / np.abs(lap)
    assert np.all(np.diff(ratio) < 0) and ratio[-1] < 1e-6
    corrected = H + lap - np.log(radii) / (8 * np.pi**2)
    # bounded, and settling at rate r^2 |ln r|
    assert np.ptp(corrected.real) < 1e-4 and np.ptp(corrected.imag) < 1e-4
    assert abs(corrected[-1] - corrected[-2]) < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 9), st.floats(0.1, 10.0), st.floats(0.05, 2.0))
def test_hankel_scaling(n, q, r):
    x = np.zeros(n)
    x[0] = r
    xs = x / np.sqrt(q)
    lhs = hankel_fundamental(n, q, xs, np.zeros(n))
    rhs = q ** ((n - 2) / 2) * hankel_fundamental(n, 1.0, x, np.zeros(n))
    assert lhs == pytest.approx(rhs, rel=1e-9)


@pytest.mark.parametrize("n", [2, 3, 10])
def test_hankel_unsupported(n):
    with pytest.raises(UnsupportedDimensionError):
        hankel_fundamental(n, 1.0, np.ones(n), np.zeros(n))


def test_zero_potential_remainder_is_harmonic_extension(square2_omega_mesh):
    mesh = square2_omega_mesh
    y = np.array([0.5, 0.5])
    field = greens_field(mesh, np.zeros(4), y)
    B = mesh.boundary_nodes
    expected = solve_dirichlet(mesh, np.zeros(4), -dipole_kernel(2, mesh.nodes[B], y))
    np.testing.assert_allclose(field.omega.values, expected.values, atol=1e-12)
    assert np.abs(field.nodal(B)).max() < 1e-12


def test_dipole_green_is_source_derivative_of_monopole(omega0_mesh):
    """G_dipole(x, y) = -d/dy2 G_monopole(x, y); this is why it is not symmetric in (x, y)."""
    q = np.array([1.0, 1.5, 0.5, 1.0])
    y = np.array([0.3, 0.6])
    eps = 2e-3
    xs = np.array([[0.7, 0.3], [0.6, 0.8], [0.2, 0.2]])
    dip = greens_field(omega0_mesh, q, y, "dipole")(xs)
    up = greens_field(omega0_mesh, q, y + [0, eps], "monopole")(xs)
    down = greens_field(omega0_mesh, q, y - [0, eps], "monopole")(xs)
    fd = -(up - down) / (2 * eps)
    np.testing.assert_allclose(dip, fd, rtol=0.05)


def test_monopole_symmetry(omega0_mesh):
    pairs = [((0.3, 0.6), (0.7, 0.3)), ((0.5, 0.5), (0.3, 0.6)), ((0.7, 0.3), (0.5, 0.5))]
    _, _, defect = symmetry_defect(omega0_mesh, np.array([1 + 0.5j, 1.5, 0.5, 1.0]), pairs, "monopole")
    assert defect <= 0.05


def test_source_too_close_to_boundary(omega0_mesh):
    with pytest.raises(SourcePlacementError):
        greens_field(omega0_mesh, np.ones(4), np.array([0.5, 0.995]))


def test_annulus_closed_form(disk_mesh):
    field = kernel_field(disk_mesh, np.zeros(2))
    for r, R in ((1e-3, 0.3), (0.01, 0.45), (0.05, 0.9)):
        expected = np.sqrt(np.log(R / r) / (4 * np.pi))
        assert annulus_l2_norm(field, r, R) == pytest.approx(expected, rel=1e-4)


def test_degenerate_annulus(disk_mesh):
    assert annulus_l2_norm(kernel_field(disk_mesh, np.zeros(2)), 0.2, 0.2) == 0.0


def test_annulus_radius_precondition(disk_mesh):
    with pytest.raises(SourcePlacementError):
        annulus_l2_norm(kernel_field(disk_mesh, np.zeros(2)), 0.6)


@settings(max_examples=10, deadline=None)
@given(st.floats(1e-4, 0.45), st.floats(1e-4, 0.45))
def test_annulus_monotone_in_radius(disk_mesh, a, b):
    field = kernel_field(disk_mesh, np.array([0.05, -0.02]))
    lo, hi = sorted((a, b))
    assert annulus_l2_norm(field, lo) >= annulus_l2_norm(field, hi) * (1 - 1e-12)


def test_blowup_coefficient(omega0_mesh):
    field = greens_field(omega0_mesh, np.array([1.0, 1.5, 0.5, 1.0]), np.array([0.5, 0.5]))
    radii = 2.0 ** -np.arange(3, 8)
    sq = np.array([annulus_l2_norm(field, r) ** 2 for r in radii])
    slope, intercept = np.polyfit(np.abs(np.log(radii)), sq, 1)
    assert slope == pytest.approx(1 / (4 * np.pi), rel=0.2)


def test_remainder_bounded_over_source_grid(square2):
    coords = np.linspace(0.2, 0.8, 5)
    sources = [np.array([a, b]) for a in coords for b in coords]
    q = np.array([1.0, 1.5 + 0.5j, 0.5, 1.0])
    maxima = []
    for h in (0.1, 0.05):
        mesh = make_mesh(square2, h)
        norms = [remainder_l2_norm(greens_field(mesh, q, y)) for y in sources]
        assert max(norms) / min(norms) < 10
        maxima.append(max(norms))
    assert maxima[1] / maxima[0] < 1.5


def test_snapshot(tmp_path, omega0_mesh):
    field = greens_field(omega0_mesh, np.ones(4), np.array([0.5, 0.5]))
    write_snapshot(field, tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "x,y,re_G,im_G,re_omega,im_omega"
    assert len(lines) == omega0_mesh.n_nodes + 1
