"""Two-spin Hilbert space: NV pseudo-qubit (mS=0, mS=-1) times a nuclear spin-1/2.

Basis order is (|0>, |-1>) x (|up>, |down>). All Hamiltonians are in rad/s.
"""

from __future__ import annotations

import numpy as np

HERMITIAN_RTOL = 1e-12
TRACE_ATOL = 1e-10

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
ID2 = np.eye(2, dtype=complex)
ID4 = np.eye(4, dtype=complex)

# electron projectors in the pseudo-qubit
PROJ_0 = np.array([[1, 0], [0, 0]], dtype=complex)
PROJ_M1 = np.array([[0, 0], [0, 1]], dtype=complex)


class InvalidOperatorError(ValueError):
    """Raised when an operator that must be Hermitian is not."""


def spin_half_operators():
    """Return (Ix, Iy, Iz), the spin-1/2 operators as 2x2 arrays."""
    return 0.5 * SIGMA_X, 0.5 * SIGMA_Y, 0.5 * SIGMA_Z


IX, IY, IZ = spin_half_operators()


def embed(electron_op, nuclear_op) -> np.ndarray:
    """Kronecker product electron (x) nuclear in the package basis order."""
    e = np.asarray(electron_op, dtype=complex)
    n = np.asarray(nuclear_op, dtype=complex)
    if e.ndim == 0:
        e = e * ID2
    if n.ndim == 0:
        n = n * ID2
    if e.shape != (2, 2) or n.shape != (2, 2):
        raise ValueError("embed expects 2x2 operators")
    return np.kron(e, n)


def is_hermitian(op, rtol: float = HERMITIAN_RTOL) -> bool:
    op = np.asarray(op)
    scale = max(np.max(np.abs(op)), 1.0)
    return bool(np.max(np.abs(op - op.conj().T)) <= rtol * scale)


def _check_hermitian(op, what: str):
    if not is_hermitian(op):
        raise InvalidOperatorError(f"{what} is not Hermitian")


def propagator(H, dt: float) -> np.ndarray:
    """Exact U = exp(-i H dt) for a constant Hermitian H via eigendecomposition."""
    H = np.asarray(H, dtype=complex)
    _check_hermitian(H, "Hamiltonian")
    if dt < 0:
        raise ValueError("dt must be non-negative")
    w, v = np.linalg.eigh(0.5 * (H + H.conj().T))
    return (v * np.exp(-1j * w * dt)) @ v.conj().T


class EigenPropagator:
    """Diagonalize a constant Hamiltonian once and produce U(t) for many t."""

    def __init__(self, H):
        H = np.asarray(H, dtype=complex)
        _check_hermitian(H, "Hamiltonian")
        self.energies, self.vectors = np.linalg.eigh(0.5 * (H + H.conj().T))
        self._vh = self.vectors.conj().T

    def __call__(self, dt: float) -> np.ndarray:
        return (self.vectors * np.exp(-1j * self.energies * dt)) @ self._vh

    def many(self, dts) -> np.ndarray:
        dts = np.asarray(dts, dtype=float)
        phases = np.exp(-1j * dts[:, None] * self.energies[None, :])
        return np.einsum("ij,tj,jk->tik", self.vectors, phases, self._vh)


def su2_propagators(fields, dts) -> np.ndarray:
    """Batch exp(-i (h . I) dt) for 2x2 spin-1/2 Hamiltonians H = h . I.

    ``fields`` has shape (N, 3) in rad/s, ``dts`` shape (N,). Closed form,
    exactly unitary; used for the block-diagonal rf segments.
    """
    h = np.asarray(fields, dtype=float)
    dts = np.asarray(dts, dtype=float)
    norm = np.linalg.norm(h, axis=1)
    half = 0.5 * norm * dts
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(norm[:, None] > 0, h / norm[:, None], 0.0)
    c = np.cos(half)
    s = np.sin(half)
    out = np.empty((len(h), 2, 2), dtype=complex)
    out[:, 0, 0] = c - 1j * s * n[:, 2]
    out[:, 1, 1] = c + 1j * s * n[:, 2]
    out[:, 0, 1] = -1j * s * (n[:, 0] - 1j * n[:, 1])
    out[:, 1, 0] = -1j * s * (n[:, 0] + 1j * n[:, 1])
    return out


def ordered_product(unitaries) -> np.ndarray:
    """Time-ordered product U_{N-1} ... U_1 U_0 of a stack of matrices.

    Pairwise tree reduction keeps the number of Python-level operations
    logarithmic in N.
    """
    u = np.asarray(unitaries)
    if len(u) == 0:
        raise ValueError("empty product")
    while len(u) > 1:
        if len(u) % 2:
            tail = u[-1:]
            u = u[:-1]
        else:
            tail = None
        u = np.matmul(u[1::2], u[0::2])
        if tail is not None:
            u = np.concatenate([u, tail])
    return u[0]


def electron_rotation(angle: float, phase: float) -> np.ndarray:
    """Ideal MW rotation of the pseudo-qubit about (cos phase, sin phase, 0)."""
    axis = np.cos(phase) * SIGMA_X + np.sin(phase) * SIGMA_Y
    r = np.cos(angle / 2) * ID2 - 1j * np.sin(angle / 2) * axis
    return np.kron(r, ID2)


def evolve(rho, U) -> np.ndarray:
    """U rho U^dagger."""
    U = np.asarray(U)
    return U @ rho @ U.conj().T


def expect(rho, O) -> float:
    """Re Tr(rho O) for Hermitian O."""
    _check_hermitian(O, "observable")
    val = np.trace(np.asarray(rho) @ np.asarray(O))
    if abs(val.imag) > 1e-10 * max(1.0, abs(val.real)):
        raise InvalidOperatorError(f"expectation value has imaginary part {val.imag:g}")
    return float(val.real)


def density_matrix(electron_state, nuclear_polarization: float = 0.0) -> np.ndarray:
    """Product state |e><e| (x) (1 + 2 p Iz)/2.

    ``electron_state`` is 0 or -1 for the pseudo-qubit eigenstates.
    """
    if not -1.0 <= nuclear_polarization <= 1.0:
        raise ValueError("polarization must lie in [-1, 1]")
    proj = {0: PROJ_0, -1: PROJ_M1}[electron_state]
    rho_n = 0.5 * (ID2 + 2 * nuclear_polarization * IZ)
    return np.kron(proj, rho_n)


def validate_density_matrix(rho, atol: float = TRACE_ATOL) -> None:
    rho = np.asarray(rho)
    if rho.shape != (4, 4):
        raise ValueError("density matrix must be 4x4")
    if not is_hermitian(rho, rtol=1e-10):
        raise InvalidOperatorError("density matrix is not Hermitian")
    tr = np.trace(rho).real
    if abs(tr - 1) > atol:
        raise ValueError(f"density matrix trace {tr} != 1")
    if np.linalg.eigvalsh(rho).min() < -atol:
        raise ValueError("density matrix has negative eigenvalues")


def nuclear_operator(op) -> np.ndarray:
    """Nuclear operator acting on both electron states."""
    return embed(ID2, op)
