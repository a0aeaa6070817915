"""Pulse-sequence construction for the three measurement protocols.

Sequences are flat, time-ordered lists of events. MW rotations are ideal and
instantaneous unless a duration is given; the electron starts in mS=0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import spin
from .coil import CoilCalibration, RfPulse, apply_distortion, synthesize
from .hamiltonian import (
    HyperfineParams,
    SystemParams,
    branch_field,
    branch_frequencies,
    full_hamiltonian,
    larmor_frequency,
)

XY8_PHASES = (0.0, math.pi / 2, 0.0, math.pi / 2, math.pi / 2, 0.0, math.pi / 2, 0.0)
# final pi/2 sits 90 degrees behind the first one (-Y); with this sign the
# block signal 2 P(mS=0) - 1 tracks +2<I_a>
READOUT_FINAL_PHASE = -math.pi / 2


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class MwRotation:
    angle: float
    phase: float = 0.0
    duration: float = 0.0


@dataclass(frozen=True)
class FreeEvolution:
    duration: float

    def __post_init__(self):
        if self.duration < 0:
            raise SequenceError(f"negative free evolution {self.duration!r}")


@dataclass(frozen=True, eq=False)
class RfSegment:
    pulse: RfPulse

    @property
    def duration(self) -> float:
        return self.pulse.window


@dataclass(frozen=True)
class ReadoutBlock:
    """AC-magnetometry block: pi/2 - [tau/2 pi tau/2] x n - pi/2, XY8 phases."""

    tau: float
    n_pulses: int
    reversed: bool = False
    pi_duration: float = 0.0

    def __post_init__(self):
        if self.n_pulses <= 0 or self.n_pulses % 8:
            raise SequenceError(f"n_pulses must be a positive multiple of 8, got {self.n_pulses}")
        if self.tau <= 0:
            raise SequenceError("tau must be positive")

    @property
    def duration(self) -> float:
        return self.n_pulses * self.tau + self.n_pulses * self.pi_duration


@dataclass(frozen=True)
class ElectronDephasing:
    """Loss of electron coherence during a long wait (T2* much shorter than the wait).

    Used between the two blocks of correlation spectroscopy, where the stored
    signal is the electron population.
    """

    duration: float = 0.0


Event = Union[MwRotation, FreeEvolution, RfSegment, ReadoutBlock, ElectronDephasing]


def event_duration(ev) -> float:
    if isinstance(ev, MwRotation):
        return ev.duration
    return ev.duration


@dataclass(frozen=True)
class PulseSequence:
    events: tuple
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        for ev in self.events:
            if not isinstance(ev, (MwRotation, FreeEvolution, RfSegment, ReadoutBlock, ElectronDephasing)):
                raise SequenceError(f"unsupported event {ev!r}")

    @property
    def total_duration(self) -> float:
        return float(math.fsum(event_duration(e) for e in self.events))

    def timeline(self):
        """List of (start, stop, event)."""
        out, t = [], 0.0
        for ev in self.events:
            d = event_duration(ev)
            out.append((t, t + d, ev))
            t += d
        return out

    def to_dict(self, samples: bool = False) -> dict:
        return {"meta": _jsonable(self.meta), "total_duration_s": self.total_duration,
                "events": [event_to_dict(e, samples) for e in self.events]}

    def to_json(self, samples: bool = False, **kw) -> str:
        return json.dumps(self.to_dict(samples), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "PulseSequence":
        return cls(tuple(event_from_dict(e) for e in d["events"]), dict(d.get("meta", {})))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def event_to_dict(ev, samples: bool = False) -> dict:
    if isinstance(ev, MwRotation):
        return {"type": "mw_rotation", "angle_rad": ev.angle, "phase_rad": ev.phase, "duration_s": ev.duration}
    if isinstance(ev, FreeEvolution):
        return {"type": "free_evolution", "duration_s": ev.duration}
    if isinstance(ev, ElectronDephasing):
        return {"type": "electron_dephasing", "duration_s": ev.duration}
    if isinstance(ev, ReadoutBlock):
        return {"type": "readout_block", "tau_s": ev.tau, "n_pulses": ev.n_pulses,
                "reversed": ev.reversed, "pi_duration_s": ev.pi_duration}
    if isinstance(ev, RfSegment):
        return {"type": "rf_segment", "duration_s": ev.duration, "pulse": ev.pulse.to_dict(samples)}
    raise SequenceError(f"unsupported event {ev!r}")


def event_from_dict(d: dict):
    kind = d["type"]
    if kind == "mw_rotation":
        return MwRotation(d["angle_rad"], d["phase_rad"], d.get("duration_s", 0.0))
    if kind == "free_evolution":
        return FreeEvolution(d["duration_s"])
    if kind == "electron_dephasing":
        return ElectronDephasing(d.get("duration_s", 0.0))
    if kind == "readout_block":
        return ReadoutBlock(d["tau_s"], d["n_pulses"], d["reversed"], d.get("pi_duration_s", 0.0))
    if kind == "rf_segment":
        return RfSegment(RfPulse.from_dict(d["pulse"]))
    raise SequenceError(f"unknown event type {kind!r}")


# --- building blocks -------------------------------------------------------

def _dd_train(tau: float, n_pulses: int, pi_duration: float = 0.0) -> list:
    events = []
    for k in range(n_pulses):
        events.append(FreeEvolution(tau / 2))
        events.append(MwRotation(math.pi, XY8_PHASES[k % 8], pi_duration))
        events.append(FreeEvolution(tau / 2))
    return _merge_free(events)


def _merge_free(events: list) -> list:
    out = []
    for ev in events:
        if isinstance(ev, FreeEvolution) and out and isinstance(out[-1], FreeEvolution):
            out[-1] = FreeEvolution(out[-1].duration + ev.duration)
        else:
            out.append(ev)
    return out


def xy8_block(tau: float, n_pulses: int, reversed: bool = False, pi_duration: float = 0.0) -> list:
    """Expanded AC-magnetometry block (see :class:`ReadoutBlock`)."""
    if n_pulses <= 0 or n_pulses % 8:
        raise SequenceError(f"n_pulses must be a positive multiple of 8, got {n_pulses}")
    events = [MwRotation(math.pi / 2, 0.0)] + _dd_train(tau, n_pulses, pi_duration) + [
        MwRotation(math.pi / 2, READOUT_FINAL_PHASE)]
    if reversed:
        # mirrored order; the leading pi/2 is flipped so that a block followed
        # directly by its reverse returns the electron to mS=0
        events = events[::-1]
        events[0] = MwRotation(math.pi / 2, READOUT_FINAL_PHASE + math.pi)
    return events


def expand_readout(block: ReadoutBlock) -> list:
    return xy8_block(block.tau, block.n_pulses, block.reversed, block.pi_duration)


def hf_pi2_block(tau: float, n_pulses: int) -> list:
    """Hyperfine-mediated nuclear pi/2: periodic pi pulses with the electron in mS=0.

    No pi/2 pulses: the electron stays in a population state so the
    transverse hyperfine field is switched on and off at 1/(2 tau).
    """
    if n_pulses < 0 or n_pulses % 2:
        raise SequenceError("n_pulses must be an even non-negative integer")
    if n_pulses == 0:
        return []
    return _dd_train(tau, n_pulses)


def resonance_tau(hf: HyperfineParams, sys: SystemParams, harmonic: int = 1) -> float:
    """tau = (2k - 1) pi / w_mean with w_mean the mean of the two branch frequencies."""
    w0, w1 = branch_frequencies(hf, sys)
    return (2 * harmonic - 1) * math.pi / (0.5 * (w0 + w1))


def _branch_unitaries(hf, sys):
    def u(ms):
        h = branch_field(ms, hf, sys)
        H = h[0] * spin.IX + h[1] * spin.IY + h[2] * spin.IZ
        return spin.EigenPropagator(H)

    return u(0), u(-1)


def _bloch_rotation(U2) -> np.ndarray:
    """SO(3) matrix of a 2x2 unitary acting on a spin-1/2 Bloch vector."""
    paulis = (spin.SIGMA_X, spin.SIGMA_Y, spin.SIGMA_Z)
    R = np.empty((3, 3))
    for j, pj in enumerate(paulis):
        out = U2 @ pj @ U2.conj().T
        for i, pi in enumerate(paulis):
            R[i, j] = 0.5 * np.trace(pi @ out).real
    return R


def hf_pi2_unit(hf, sys, tau: float, n_pulses: int = 8):
    """Nuclear 2x2 unitary of the hyperfine drive block (electron starts in mS=0)."""
    if n_pulses % 2:
        raise SequenceError("n_pulses must be even")
    if n_pulses == 0:
        return np.eye(2, dtype=complex)
    P0, P1 = _branch_unitaries(hf, sys)
    U = P0(tau / 2)
    for k in range(1, n_pulses + 1):
        branch = P1 if k % 2 else P0
        U = branch(tau if k < n_pulses else tau / 2) @ U
    return U


def _axis_tilt_cos(R) -> float:
    """|cos| of the angle between the rotation axis of R and z."""
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    norm = np.linalg.norm(w)
    return abs(w[2]) / norm if norm > 0 else 1.0


def _exact_resonance(hf, sys, harmonic: int) -> float:
    """tau near the mean-frequency estimate where the drive axis is in-plane."""
    tau0 = resonance_tau(hf, sys, harmonic)
    half = 0.02 / (2 * harmonic - 1)
    res = minimize_scalar(lambda t: _axis_tilt_cos(_bloch_rotation(hf_pi2_unit(hf, sys, t, 2))),
                          bounds=(tau0 * (1 - half), tau0 * (1 + half)), method="bounded",
                          options={"xatol": 1e-12 * tau0})
    return float(res.x)


def calibrate_hf_pi2(hf: HyperfineParams, sys: SystemParams, *, max_pulses: int = 4096,
                     harmonics: Iterable[int] = (1,), undershoot_tol: float = 0.02,
                     overshoot_tol: float = 0.1, tau_window: float = 0.15, grid: int = 301):
    """Find (tau, n_pulses) for a hyperfine-mediated nuclear pi/2 rotation.

    At each DD resonance harmonic (tau refined so the drive axis lies in the
    plane) the even pulse counts bracketing pi/2 are examined via the Bloch
    z component of a polarized nucleus. An undershoot z <= ``undershoot_tol``
    is accepted as is; an overshoot within ``overshoot_tol`` rad is accepted
    and tau detuned by a root solve so that z = 0 exactly. Harmonics are tried
    in order; if none qualifies the smallest overshoot is used. Keeping the
    axis near the plane makes the block a true pi/2: doubling n inverts.
    """
    if hf.a_perp <= 0:
        raise SequenceError("a_perp = 0: the hyperfine field cannot drive the nucleus")
    fallback = None
    choice = None
    for k in harmonics:
        tau_k = _exact_resonance(hf, sys, k)
        R2 = _bloch_rotation(hf_pi2_unit(hf, sys, tau_k, 2))
        v = np.array([0.0, 0.0, 1.0])
        z_lo = 1.0
        for n in range(2, max_pulses + 1, 2):
            v = R2 @ v
            if v[2] <= 0:
                break
            z_lo = v[2]
        else:
            continue
        if n > 2 and z_lo <= undershoot_tol:
            choice = (k, tau_k, n - 2, False)
            break
        if -v[2] <= math.sin(overshoot_tol):
            choice = (k, tau_k, n, True)
            break
        if fallback is None or v[2] > fallback[0]:
            fallback = (v[2], (k, tau_k, n, True))
    if choice is None:
        if fallback is None:
            raise SequenceError(f"no pi/2 rotation reachable within {max_pulses} pulses (a_perp too small)")
        choice = fallback[1]
    k, tau_k, n, detune = choice
    if not detune:
        return tau_k, n

    def iz(tau):
        return _bloch_rotation(hf_pi2_unit(hf, sys, tau, n))[2, 2]

    half = tau_window / (2 * k - 1)
    taus = tau_k * np.linspace(1 - half, 1 + half, grid)
    z = np.array([iz(t) for t in taus])
    crossings = np.nonzero(np.sign(z[:-1]) != np.sign(z[1:]))[0]
    if len(crossings) == 0:
        raise SequenceError("no tau near resonance brings <Iz> to zero")
    i = crossings[np.argmin(np.abs(taus[crossings] + taus[crossings + 1] - 2 * tau_k))]
    tau = brentq(iz, taus[i], taus[i + 1], xtol=1e-18, rtol=1e-14)
    return tau, n


def readout_observable(hf, sys, block: ReadoutBlock):
    """Effective nuclear observable measured by a readout block.

    For an electron starting in mS=0 the block signal is Tr(rho_n M); returns
    (m0, m) with M = m0 + 2 m . I.
    """
    U = _block_unitary(hf, sys, block.tau, block.n_pulses, block.reversed)
    return _observable_of(U)


def _observable_of(U):
    Z = spin.embed(spin.SIGMA_Z, spin.ID2)
    M = (U.conj().T @ Z @ U)[:2, :2]
    m0 = 0.5 * np.trace(M).real
    m = np.array([np.trace(M @ op).real for op in (spin.IX, spin.IY, spin.IZ)])
    return m0, m


def _block_unitary(hf, sys, tau, n, reversed=False):
    prop = spin.EigenPropagator(full_hamiltonian(hf, sys))
    Uh = prop(tau / 2)
    cell = np.eye(4, dtype=complex)
    for k in range(8):
        cell = Uh @ spin.electron_rotation(math.pi, XY8_PHASES[k]) @ Uh @ cell
    first = spin.electron_rotation(math.pi / 2, 0.0)
    last = spin.electron_rotation(math.pi / 2, READOUT_FINAL_PHASE)
    body = np.linalg.matrix_power(cell, n // 8)
    if reversed:
        # mirrored order (the XY8 cell is a palindrome), leading pi/2 flipped
        return first @ body @ spin.electron_rotation(math.pi / 2, READOUT_FINAL_PHASE + math.pi)
    return last @ body @ first


def calibrate_readout(hf: HyperfineParams, sys: SystemParams, *, pulse_counts: Iterable[int] = (8, 16, 24, 32, 40, 48),
                      harmonics: Iterable[int] = (1, 2, 3), tau_window: float = 0.2, grid: int = 401):
    """Choose (tau, n_pulses) so the readout block measures 2 I_a.

    Minimizes |m0| + |m_perp - a| over tau near each DD resonance harmonic,
    where the block signal is Tr(rho_n (m0 + 2 m . I)) and a is the in-plane
    hyperfine direction. The mismatch is invariant under the azimuth phi.
    """
    a = np.array([math.cos(hf.phi), math.sin(hf.phi)])
    pulse_counts = sorted(pulse_counts)

    def mismatch(tau, n):
        m0, m = _observable_of(_block_unitary(hf, sys, tau, n))
        return abs(m0) + float(np.hypot(m[0] - a[0], m[1] - a[1]))

    best = None
    for k in harmonics:
        tau0 = resonance_tau(hf, sys, k)
        for n in pulse_counts:
            taus = tau0 * np.linspace(1 - tau_window, 1 + tau_window, grid)
            vals = [mismatch(t, n) for t in taus]
            i = int(np.argmin(vals))
            lo, hi = taus[max(i - 1, 0)], taus[min(i + 1, grid - 1)]
            res = minimize_scalar(lambda t: mismatch(t, n), bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-15 * tau0 + 1e-16})
            cand = (min(res.fun, vals[i]), res.x if res.fun <= vals[i] else taus[i], n)
            if best is None or cand[0] < best[0] - 1e-12:
                best = cand
    return best[1], best[2]


# --- protocols -------------------------------------------------------------

def _pi2_events(pi2) -> list:
    if isinstance(pi2, RfPulse):
        return [RfSegment(pi2)]
    return list(pi2)


def precession_experiment(kind: str, pi2, t1_grid: Sequence[float], readout: ReadoutBlock) -> list:
    """One sequence per t1: pi/2 (hyperfine block or coil pulse), wait t1, readout."""
    if kind not in ("reference", "coil"):
        raise SequenceError(f"unknown precession experiment kind {kind!r}")
    t1_grid = list(t1_grid)
    if not t1_grid:
        raise SequenceError("t1_grid must be non-empty")
    if any(t < 0 for t in t1_grid):
        raise SequenceError("t1 values must be non-negative")
    head = _pi2_events(pi2)
    return [
        PulseSequence(tuple(head) + (FreeEvolution(float(t1)), readout),
                      {"kind": kind, "abscissa": float(t1), "abscissa_unit": "s"})
        for t1 in t1_grid
    ]


@dataclass(frozen=True)
class PulseTemplate:
    """Coil pulse settings; ``build`` synthesizes and distorts a pulse."""

    carrier_freq: float
    amplitude: float
    duration: float
    envelope: str = "rectangular"
    phase: float = 0.0
    dt: float = 1e-9

    def build(self, cal: CoilCalibration, phase: Optional[float] = None, distort: bool = True) -> RfPulse:
        p = synthesize(self.carrier_freq, self.phase if phase is None else phase, self.amplitude,
                       self.envelope, self.duration, cal, self.dt)
        return apply_distortion(p, cal) if distort else p

    def with_(self, **kw) -> "PulseTemplate":
        from dataclasses import replace

        return replace(self, **kw)


def carrier_phase_for_axis(axis_azimuth: float, t_ref: float, template: PulseTemplate, cal: CoilCalibration,
                           precession_sign: int = -1) -> float:
    """Carrier phase that puts the co-rotating rf component at lab azimuth
    ``axis_azimuth`` at time ``t_ref`` after pulse start.

    Accounts for the coil azimuth, the steady-state filter lag, and the delay.
    ``precession_sign`` is -1 for clockwise nuclear precession (gamma_n > 0,
    B0 along +z).
    """
    w = 2 * math.pi * template.carrier_freq
    lag = 0.0 if math.isinf(cal.f3db) else math.atan(template.carrier_freq / cal.f3db)
    lag += w * cal.delay
    if precession_sign < 0:
        # co-rotating azimuth: phi_coil - (w t + phase - lag)
        return cal.azimuth - axis_azimuth - w * t_ref + lag
    return axis_azimuth - cal.azimuth - w * t_ref + lag


def precession_sign(sys: SystemParams) -> int:
    return -1 if sys.gamma_n * sys.B0[2] > 0 else 1


def echo_experiment(t1: float, phi_rf_grid: Sequence[float], rf_pi: PulseTemplate, cal: CoilCalibration,
                    readout: ReadoutBlock, sys: Optional[SystemParams] = None) -> list:
    """Correlation spectroscopy with a selective rf pi pulse centred in 2 t1.

    ``phi_rf`` is the lab-frame azimuth of the rf rotation axis (co-rotating
    component at the echo centre); the carrier phase is derived from the coil
    calibration. Blocks: readout, wait, rf pi, wait, reversed readout.
    """
    sign = precession_sign(sys) if sys is not None else -1
    half = 0.5 * rf_pi.duration
    seqs = []
    for phi_rf in phi_rf_grid:
        chi = carrier_phase_for_axis(float(phi_rf), half, rf_pi, cal, sign)
        pulse = rf_pi.build(cal, phase=chi)
        before = t1 - half
        after = t1 - (pulse.window - half)
        if before < 0 or after < 0:
            raise SequenceError("rf pi pulse (with settling tail) does not fit in 2 t1")
        events = (readout, ElectronDephasing(), FreeEvolution(before), RfSegment(pulse), FreeEvolution(after),
                  ReadoutBlock(readout.tau, readout.n_pulses, not readout.reversed, readout.pi_duration))
        seqs.append(PulseSequence(events, {"kind": "echo", "abscissa": float(phi_rf), "abscissa_unit": "rad",
                                           "t1_s": t1}))
    return seqs
