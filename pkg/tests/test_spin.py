import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from nvpos import spin
from nvpos.spin import IX, IY, IZ, embed, expect, propagator

from conftest import random_hermitian

UP = np.array([1, 0], dtype=complex)


def test_spin_half_algebra():
    assert np.allclose(IZ @ UP, 0.5 * UP)
    assert np.allclose(IX @ IY - IY @ IX, 1j * IZ)
    assert np.isclose(np.trace(IX @ IX), 0.5)


def test_embed_examples():
    assert np.allclose(embed(1, IZ), np.diag([0.5, -0.5, 0.5, -0.5]))
    assert np.allclose(embed(spin.PROJ_0, 1), np.diag([1, 1, 0, 0]))
    sx = embed(spin.SIGMA_X, spin.SIGMA_X)
    assert np.allclose(sx @ sx, np.eye(4))


def test_embed_rejects_bad_shapes():
    with pytest.raises(ValueError):
        embed(np.eye(3), IZ)


def test_propagator_zero_time_is_identity(rng):
    H = random_hermitian(rng, scale=1e5)
    assert np.allclose(propagator(H, 0.0), np.eye(4))


def test_propagator_diagonal_phase():
    w, t = 2 * np.pi * 1e5, 3.3e-6
    U = propagator(w * embed(1, IZ), t)
    assert np.isclose(U[0, 0], np.exp(-0.5j * w * t), atol=1e-12)


def test_propagator_composition(rng):
    H = random_hermitian(rng, scale=2e5)
    lhs = propagator(H, 1.2e-6) @ propagator(H, 0.7e-6)
    assert np.max(np.abs(lhs - propagator(H, 1.9e-6))) < 1e-10


def test_propagator_matches_scipy_expm(rng):
    H = random_hermitian(rng, scale=1e5)
    assert np.allclose(propagator(H, 2e-6), expm(-1j * H * 2e-6), atol=1e-12)


def test_propagator_small_step_series(rng):
    # 4th-order Taylor series oracle for ||H|| t < 1e-3
    H = random_hermitian(rng)
    t = 1e-3 / np.linalg.norm(H, 2) * 0.5
    A = -1j * H * t
    series = np.eye(4) + A + A @ A / 2 + A @ A @ A / 6 + A @ A @ A @ A / 24
    assert np.max(np.abs(propagator(H, t) - series)) < 1e-12


def test_propagator_rejects_non_hermitian():
    H = np.zeros((4, 4), dtype=complex)
    H[0, 1] = 1.0
    with pytest.raises(spin.InvalidOperatorError):
        propagator(H, 1.0)


def test_propagator_rejects_negative_time():
    with pytest.raises(ValueError):
        propagator(np.eye(4), -1.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), scale=st.floats(1e-3, 1e7), dt=st.floats(0, 1e-3))
def test_propagator_is_unitary(seed, scale, dt):
    H = random_hermitian(np.random.default_rng(seed), scale=scale)
    U = propagator(H, dt)
    assert np.max(np.abs(U.conj().T @ U - np.eye(4))) < 1e-10


def test_eigen_propagator_batches_agree(rng):
    H = random_hermitian(rng, scale=1e5)
    P = spin.EigenPropagator(H)
    dts = np.array([0.0, 1e-6, 5e-6])
    for U, dt in zip(P.many(dts), dts):
        assert np.allclose(U, propagator(H, dt), atol=1e-12)


def test_su2_propagators_match_eigendecomposition(rng):
    h = rng.normal(size=(5, 3)) * 1e5
    dts = rng.uniform(0, 1e-5, 5)
    U = spin.su2_propagators(h, dts)
    for k in range(5):
        H = h[k, 0] * IX + h[k, 1] * IY + h[k, 2] * IZ
        assert np.allclose(U[k], expm(-1j * H * dts[k]), atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 7, 16, 33])
def test_ordered_product_matches_loop(rng, n):
    us = np.array([propagator(random_hermitian(rng), 0.3) for _ in range(n)])
    ref = np.eye(4, dtype=complex)
    for u in us:
        ref = u @ ref
    assert np.allclose(spin.ordered_product(us), ref, atol=1e-12)


def test_expect_examples():
    mixed = np.eye(4) / 4
    assert expect(mixed, embed(1, IZ)) == pytest.approx(0.0)
    up = spin.density_matrix(0, 1.0)
    assert expect(up, embed(1, IZ)) == pytest.approx(0.5)
    assert expect(up, np.eye(4)) == pytest.approx(1.0)


def test_expect_rejects_non_hermitian_observable():
    O = np.zeros((4, 4))
    O[0, 1] = 1
    with pytest.raises(spin.InvalidOperatorError):
        expect(np.eye(4) / 4, O)


def test_evolve_preserves_state_over_many_steps(rng):
    rho = spin.density_matrix(0, 0.8)
    Us = [propagator(random_hermitian(rng, scale=1.0), 0.7) for _ in range(50)]
    for k in range(10_000):
        rho = spin.evolve(rho, Us[k % 50])
    assert abs(np.trace(rho).real - 1) < 1e-10
    assert spin.is_hermitian(rho, rtol=1e-10)
    assert np.linalg.eigvalsh(rho).min() > -1e-9
    spin.validate_density_matrix(rho)


def test_density_matrix_basis_order():
    rho = spin.density_matrix(-1, 0.0)
    assert np.allclose(np.diag(rho).real, [0, 0, 0.5, 0.5])
    with pytest.raises(ValueError):
        spin.density_matrix(0, 1.5)


def test_electron_rotation_pi_about_x_flips_electron():
    R = spin.electron_rotation(np.pi, 0.0)
    rho = spin.evolve(spin.density_matrix(0, 0.0), R)
    assert np.isclose(expect(rho, embed(spin.PROJ_M1, 1)), 1.0)
