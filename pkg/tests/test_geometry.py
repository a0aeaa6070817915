import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvpos.constants import DIAMOND_LATTICE_CONSTANT
from nvpos.geometry import (
    ANGSTROM,
    LAB_AXES,
    MAGIC_ANGLE,
    InversionError,
    LatticeSite,
    PositionEstimate,
    assemble_position,
    dipolar_constant,
    dipole_forward,
    dipole_invert,
    lattice_sites,
    match_site,
    polar_plot_csv,
    position_json,
)
from nvpos.hamiltonian import SystemParams

from conftest import KHZ

SYS = SystemParams.along_z(9.6e-3)


def test_forward_special_angles():
    b = dipolar_constant(8 * ANGSTROM, SYS)
    a_par, a_perp = dipole_forward(8 * ANGSTROM, MAGIC_ANGLE, SYS)
    assert abs(a_par) < 1e-12 * b
    a_par, a_perp = dipole_forward(8 * ANGSTROM, 0.0, SYS)
    assert a_perp == 0 and a_par == pytest.approx(2 * b)


def test_dipolar_constant_scale():
    # DERIVED: CODATA constants from scipy, gamma_e / 2 pi = 28.024 GHz/T, gamma_n / 2 pi = 10.7084 MHz/T
    from scipy import constants as sc

    b = sc.mu_0 / (4 * math.pi) * sc.hbar * (2 * math.pi * 28.024e9) * (2 * math.pi * 10.7084e6) / 1e-27
    assert dipolar_constant(1e-9, SYS) == pytest.approx(b, rel=1e-6)
    assert b / KHZ == pytest.approx(19.88, abs=0.01)


def test_c2_distance():
    # PAPER: r = 11.5 A for couplings 2 pi (1.9, 19.2) kHz
    r, theta = dipole_invert(1.9 * KHZ, 19.2 * KHZ, SYS)
    assert r / ANGSTROM == pytest.approx(11.5, abs=0.1)


def test_c1_inversion_against_grid_oracle():
    # DERIVED: brute-force search of the forward model on a fine theta grid
    a_par, a_perp = 18.5 * KHZ, 41.4 * KHZ
    r, theta = dipole_invert(a_par, a_perp, SYS)
    th = np.linspace(1e-4, math.pi / 2 - 1e-4, 200001)
    ratio = (3 * np.cos(th) ** 2 - 1) / (3 * np.sin(th) * np.cos(th))
    t_grid = th[np.argmin(np.abs(ratio - a_par / a_perp))]
    assert theta == pytest.approx(t_grid, abs=2e-5)
    assert dipole_forward(r, theta, SYS) == pytest.approx((a_par, a_perp), rel=1e-9)


def test_invert_special_cases():
    b = dipolar_constant(7 * ANGSTROM, SYS)
    r, t = dipole_invert(2 * b, 0.0, SYS)
    assert t == 0.0 and r == pytest.approx(7 * ANGSTROM, rel=1e-12)
    r, t = dipole_invert(-b, 0.0, SYS)
    assert t == pytest.approx(math.pi / 2) and r == pytest.approx(7 * ANGSTROM, rel=1e-12)
    r, t = dipole_invert(0.0, 3 * b * math.sqrt(2) / 3, SYS)
    assert t == MAGIC_ANGLE and r == pytest.approx(7 * ANGSTROM, rel=1e-12)
    with pytest.raises(InversionError):
        dipole_invert(0.0, 0.0, SYS)
    with pytest.raises(InversionError):
        dipole_invert(1.0, -1.0, SYS)


def _grid():
    for r in np.linspace(3, 15, 13):
        for t in np.linspace(1e-3, math.pi / 2 - 1e-3, 181):
            if abs(t - MAGIC_ANGLE) > 1e-3 and t > 1e-3:
                yield r * ANGSTROM, t


def test_round_trip_grid():
    worst = 0.0
    for r, t in _grid():
        r2, t2 = dipole_invert(*dipole_forward(r, t, SYS), SYS)
        worst = max(worst, abs(r2 - r) / r, abs(t2 - t) / t)
    assert worst < 1e-9


@settings(max_examples=50, deadline=None)
@given(r=st.floats(3, 15), theta=st.floats(0.01, math.pi / 2 - 0.01), k=st.floats(0.1, 10))
def test_scaling_property(r, theta, k):
    a, b = dipole_forward(r * ANGSTROM, theta, SYS)
    r1, t1 = dipole_invert(a, b, SYS)
    r2, t2 = dipole_invert(k * a, k * b, SYS)
    assert t2 == pytest.approx(t1, abs=1e-12)
    assert r2 == pytest.approx(r1 * k ** (-1 / 3), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(r=st.floats(0.1, 30), theta=st.floats(0, math.pi), phi=st.floats(0, 2 * math.pi))
def test_position_invariants(r, theta, phi):
    p = PositionEstimate(r * ANGSTROM, theta, phi)
    assert p.rho ** 2 + p.z ** 2 == pytest.approx(p.r ** 2, rel=1e-12)
    assert np.linalg.norm(p.cartesian()) == pytest.approx(p.r, rel=1e-12)
    assert p.z >= 0


def test_zero_input_sigma_gives_zero_output_sigma():
    p = assemble_position(18.5 * KHZ, 41.4 * KHZ, math.radians(191), SYS)
    assert p.sigma_r == p.sigma_theta == p.sigma_rho == p.sigma_z == 0.0
    assert math.degrees(p.phi) == pytest.approx(191)


def test_sigma_propagation_matches_monte_carlo():
    # DERIVED: sample the couplings and push each draw through the inversion
    a, b, sa, sb = 18.5 * KHZ, 41.4 * KHZ, 0.1 * KHZ, 0.2 * KHZ
    p = assemble_position(a, b, 0.0, SYS, sa, sb)
    rng = np.random.default_rng(2)
    draws = np.array([dipole_invert(x, y, SYS) for x, y in zip(rng.normal(a, sa, 4000), rng.normal(b, sb, 4000))])
    rho = draws[:, 0] * np.sin(draws[:, 1])
    z = draws[:, 0] * np.abs(np.cos(draws[:, 1]))
    assert p.sigma_rho == pytest.approx(np.std(rho), rel=0.05)
    assert p.sigma_z == pytest.approx(np.std(z), rel=0.05)
    assert p.sigma_r == pytest.approx(np.std(draws[:, 0]), rel=0.05)


@pytest.mark.parametrize("name,a_par,a_perp,s_par,s_perp", [
    ("C1", 18.5, 41.4, 0.1, 0.2),
    ("C2", 1.9, 19.2, 0.1, 0.1),
])
def test_position_uncertainty_below_two_hundredths_angstrom(name, a_par, a_perp, s_par, s_perp):
    # PAPER: sigma(rho), sigma(z) < 0.02 A for the quoted coupling errors
    p = assemble_position(a_par * KHZ, a_perp * KHZ, 0.0, SYS, s_par * KHZ, s_perp * KHZ)
    assert p.sigma_rho / ANGSTROM < 0.02
    assert p.sigma_z / ANGSTROM < 0.02


# --- lattice -----------------------------------------------------------------

def test_lab_axes_orthonormal():
    assert np.allclose(LAB_AXES @ LAB_AXES.T, np.eye(3))
    assert np.linalg.det(LAB_AXES) == pytest.approx(1.0)
    assert np.allclose(LAB_AXES[2], np.ones(3) / math.sqrt(3))


def test_nearest_neighbour_distance():
    # DERIVED: a sqrt(3) / 4
    sites = lattice_sites(6 * ANGSTROM, include_defect=True)
    P = np.array([s.position for s in sites])
    d = np.linalg.norm(P[:, None] - P[None], axis=-1)
    nn = d[d > 1e-15].min()
    assert nn / ANGSTROM == pytest.approx(DIAMOND_LATTICE_CONSTANT * math.sqrt(3) / 4 / ANGSTROM, rel=1e-12)
    assert nn / ANGSTROM == pytest.approx(1.544, abs=1e-3)


def test_defect_sites_on_axis():
    with_defect = lattice_sites(2 * ANGSTROM, include_defect=True)
    without = lattice_sites(2 * ANGSTROM)
    assert len(with_defect) - len(without) == 2
    axis = [s for s in with_defect if math.hypot(*s.position[:2]) < 1e-20]
    assert len(axis) == 2
    assert all(abs(abs(s.position[2]) - 0.7722e-10) < 1e-13 for s in axis)


def test_site_count_scales_with_volume():
    # 8 atoms per cubic cell of side a
    density = 8 / DIAMOND_LATTICE_CONSTANT ** 3
    for R in (15 * ANGSTROM, 25 * ANGSTROM):
        n = len(lattice_sites(R, include_defect=True))
        assert n == pytest.approx(4 / 3 * math.pi * R ** 3 * density, rel=0.03)


def test_sites_invariant_under_threefold_rotation():
    P = np.array([s.position for s in lattice_sites(10 * ANGSTROM)])
    c, s = math.cos(2 * math.pi / 3), math.sin(2 * math.pi / 3)
    Q = P @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T
    d = np.linalg.norm(Q[:, None] - P[None], axis=-1).min(axis=1)
    assert d.max() < 1e-9 * ANGSTROM


def test_site_indices_increase_outward():
    sites = lattice_sites(8 * ANGSTROM)
    d = [np.linalg.norm(s.position) for s in sites]
    assert [s.index for s in sites] == list(range(1, len(sites) + 1))
    assert all(np.diff(d) >= -1e-20)


def _on_site(site):
    x, y, z = site.position
    r = np.linalg.norm(site.position)
    theta = math.acos(abs(z) / r)
    return PositionEstimate(r, theta, math.atan2(y, x) % (2 * math.pi))


def test_match_exact_site():
    sites = lattice_sites(10 * ANGSTROM)
    target = next(s for s in sites if s.position[2] > 1e-10 and math.hypot(*s.position[:2]) > 1e-10)
    m = match_site(_on_site(target), sites, 0.1 * ANGSTROM)
    assert m.site == target and m.residual < 1e-20


def test_match_zero_tolerance_off_site():
    sites = lattice_sites(10 * ANGSTROM)
    p = _on_site(sites[20])
    off = PositionEstimate(p.r * 1.01, p.theta, p.phi)
    assert match_site(off, sites, 0.0) is None
    assert match_site(off, sites, 1 * ANGSTROM) is not None


def test_match_ambiguous_180():
    sites = lattice_sites(10 * ANGSTROM)
    target = next(s for s in sites if s.position[2] > 1e-10 and math.hypot(*s.position[:2]) > 1e-10)
    p = _on_site(target)
    flipped = PositionEstimate(p.r, p.theta, (p.phi + math.pi) % (2 * math.pi))
    m = match_site(flipped, sites, 1e-3 * ANGSTROM, ambiguous_180=True)
    assert m is not None and m.site == target
    assert m.phi_used == pytest.approx(p.phi)


def test_match_with_no_sites():
    assert match_site(PositionEstimate(1e-10, 0.3, 0.1), [], 1.0) is None
    with pytest.raises(ValueError):
        match_site(PositionEstimate(1e-10, 0.3, 0.1), [LatticeSite(1, (0, 0, 0))], -1.0)


def test_exports():
    p = assemble_position(1.9 * KHZ, 19.2 * KHZ, math.radians(30), SYS, 0.1 * KHZ, 0.1 * KHZ, math.radians(2))
    d = json.loads(position_json(p))
    assert d["r_angstrom"] == pytest.approx(11.5, abs=0.1)
    assert d["match"] == "none"
    assert d["phi_candidates_deg"] == pytest.approx([30, 210])
    lines = polar_plot_csv([("C2", p)]).splitlines()
    assert lines[0] == "label,rho_A,phi_deg,z_A,sigma_phi_deg"
    assert float(lines[1].split(",")[2]) == pytest.approx(30)
