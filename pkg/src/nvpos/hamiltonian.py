"""Lab-frame Hamiltonians of a 13C nucleus coupled to the NV pseudo-qubit.

Convention: H(ms) = -gamma_n (B0 + B_coil) . I + ms (A_z . I) with
ms in {0, -1} and gamma_n > 0. Electron Zeeman and zero-field terms only add
a phase per electron branch and are dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import spin
from .constants import GAMMA_C13, GAMMA_E

DEFAULT_MAX_PHASE_STEP = 0.01  # rad


@dataclass(frozen=True)
class HyperfineParams:
    """Secular hyperfine vector in cylindrical form, all in rad/s / rad."""

    a_par: float
    a_perp: float
    phi: float = 0.0

    def __post_init__(self):
        if self.a_perp < 0:
            raise ValueError("a_perp must be non-negative; absorb the sign into phi")
        object.__setattr__(self, "phi", float(self.phi) % (2 * math.pi))

    @classmethod
    def from_khz(cls, a_par_khz: float, a_perp_khz: float, phi_deg: float = 0.0):
        return cls(2 * math.pi * a_par_khz * 1e3, 2 * math.pi * a_perp_khz * 1e3, math.radians(phi_deg))

    def with_phi(self, phi: float) -> "HyperfineParams":
        return replace(self, phi=phi)


@dataclass(frozen=True)
class SystemParams:
    B0: tuple = (0.0, 0.0, 0.01)  # T
    gamma_n: float = GAMMA_C13
    gamma_e: float = GAMMA_E
    polarization: float = 0.8

    def __post_init__(self):
        b0 = tuple(float(x) for x in np.broadcast_to(np.asarray(self.B0, dtype=float), (3,)))
        object.__setattr__(self, "B0", b0)
        if not -1.0 <= self.polarization <= 1.0:
            raise ValueError("polarization must lie in [-1, 1]")
        if np.linalg.norm(b0) <= 0:
            raise ValueError("B0 must be non-zero")

    @classmethod
    def along_z(cls, B0_tesla: float, **kw) -> "SystemParams":
        return cls(B0=(0.0, 0.0, B0_tesla), **kw)

    @property
    def B0_magnitude(self) -> float:
        return float(np.linalg.norm(self.B0))

    def with_B0_magnitude(self, magnitude: float) -> "SystemParams":
        b = np.asarray(self.B0)
        return replace(self, B0=tuple(b / np.linalg.norm(b) * magnitude))

    def with_polarization(self, p: float) -> "SystemParams":
        return replace(self, polarization=p)


@dataclass(frozen=True)
class FieldSample:
    t: float
    B: tuple = field(default=(0.0, 0.0, 0.0))


def hyperfine_vector(hf: HyperfineParams) -> np.ndarray:
    """A_z = (a_perp cos phi, a_perp sin phi, a_par) in rad/s."""
    return np.array([hf.a_perp * math.cos(hf.phi), hf.a_perp * math.sin(hf.phi), hf.a_par])


def branch_field(ms: int, hf: HyperfineParams, sys: SystemParams, B_coil=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Effective field vector h (rad/s) such that H(ms) = h . I."""
    if ms not in (0, -1):
        raise ValueError("ms must be 0 or -1")
    B = np.asarray(sys.B0) + np.asarray(B_coil, dtype=float)
    return -sys.gamma_n * B + ms * hyperfine_vector(hf)


def nuclear_hamiltonian(ms: int, hf: HyperfineParams, sys: SystemParams, B_coil=(0.0, 0.0, 0.0)) -> np.ndarray:
    h = branch_field(ms, hf, sys, B_coil)
    return h[0] * spin.IX + h[1] * spin.IY + h[2] * spin.IZ


def conditional_hamiltonian(ms, hf: HyperfineParams, sys: SystemParams, B_coil=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Embedded H for one branch (ms = 0 or -1) or the full block-diagonal H (ms=None)."""
    if ms is None:
        return sum(conditional_hamiltonian(m, hf, sys, B_coil) for m in (0, -1))
    proj = spin.PROJ_0 if ms == 0 else spin.PROJ_M1
    return spin.embed(proj, nuclear_hamiltonian(ms, hf, sys, B_coil))


def full_hamiltonian(hf: HyperfineParams, sys: SystemParams, B_coil=(0.0, 0.0, 0.0)) -> np.ndarray:
    return conditional_hamiltonian(None, hf, sys, B_coil)


def branch_frequencies(hf: HyperfineParams, sys: SystemParams) -> tuple[float, float]:
    """Nuclear precession frequencies (rad/s) in the mS=0 and mS=-1 branches."""
    return (
        float(np.linalg.norm(branch_field(0, hf, sys))),
        float(np.linalg.norm(branch_field(-1, hf, sys))),
    )


def larmor_frequency(sys: SystemParams) -> float:
    """Bare 13C Larmor frequency gamma_n |B0| in rad/s."""
    return sys.gamma_n * sys.B0_magnitude


def segment_schedule(pulse, max_phase_step: float = DEFAULT_MAX_PHASE_STEP):
    """Split a sampled coil pulse into piecewise-constant field segments.

    Returns a list of (B vector in T, dt in s). Segment durations sum to the
    pulse window (nominal duration plus any settling tail); the segment field is the mean of the linearly
    interpolated waveform over the segment.
    """
    if max_phase_step <= 0:
        raise ValueError("max_phase_step must be positive")
    B, dt = segment_arrays(pulse, max_phase_step)
    return [(tuple(b), float(d)) for b, d in zip(B, dt)]


def segment_arrays(pulse, max_phase_step: float = DEFAULT_MAX_PHASE_STEP):
    """Array form of :func:`segment_schedule`: (fields (N, 3), dts (N,))."""
    t = np.asarray(pulse.t, dtype=float)
    Bs = np.asarray(pulse.field, dtype=float)
    duration = float(pulse.window)
    if len(t) == 0 or duration <= 0:
        return np.zeros((0, 3)), np.zeros(0)
    if np.all(Bs == Bs[0]):
        return Bs[:1].copy(), np.array([duration])
    if pulse.carrier_freq > 0:
        dt_max = max_phase_step / (2 * math.pi * pulse.carrier_freq)
    else:
        dt_max = float(np.min(np.diff(t))) if len(t) > 1 else duration
    n = max(1, int(math.ceil(duration / dt_max * (1 - 1e-12))))
    edges = np.linspace(0.0, duration, n + 1)
    edges[-1] = duration
    dts = np.diff(edges)
    return _segment_means(t, Bs, edges), dts


def _segment_means(t, Bs, edges):
    # exact average of the piecewise-linear interpolant (zero outside samples)
    def cumulative(x):
        out = np.empty((len(x), 3))
        for k in range(3):
            y = Bs[:, k]
            cum = np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))])
            xi = np.clip(x, t[0], t[-1])
            idx = np.clip(np.searchsorted(t, xi, side="right") - 1, 0, len(t) - 2) if len(t) > 1 else np.zeros(len(x), int)
            if len(t) == 1:
                out[:, k] = 0.0
                continue
            h = xi - t[idx]
            slope = (y[idx + 1] - y[idx]) / (t[idx + 1] - t[idx])
            out[:, k] = cum[idx] + y[idx] * h + 0.5 * slope * h * h
        return out

    c = cumulative(edges)
    width = np.diff(edges)[:, None]
    return np.diff(c, axis=0) / width
