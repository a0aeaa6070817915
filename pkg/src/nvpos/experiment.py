"""Run pulse sequences on the two-spin state and assemble measurement traces."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import spin
from .hamiltonian import (
    DEFAULT_MAX_PHASE_STEP,
    HyperfineParams,
    SystemParams,
    branch_field,
    full_hamiltonian,
    hyperfine_vector,
    segment_arrays,
)
from .sequence import (
    ElectronDephasing,
    FreeEvolution,
    MwRotation,
    PulseSequence,
    ReadoutBlock,
    RfSegment,
    SequenceError,
    expand_readout,
)

READOUT_MODES = ("full", "ideal")
_READOUT_Z = spin.embed(spin.SIGMA_Z, spin.ID2)


@dataclass(frozen=True)
class NoiseModel:
    """Photon shot noise of the optical readout.

    Each shot detects a photon in the +/- readout channel with probability
    photons_per_shot * (1 +/- contrast * signal) / 2.
    """

    photons_per_shot: float = 0.03
    contrast: float = 0.3
    shots_per_point: int = 100_000
    rng_seed: int = 0

    def __post_init__(self):
        if self.photons_per_shot <= 0:
            raise ValueError("photons_per_shot must be positive")
        if not 0 < self.contrast <= 1:
            raise ValueError("contrast must lie in (0, 1]")
        if self.shots_per_point <= 0:
            raise ValueError("shots_per_point must be positive")
        if self.photons_per_shot * (1 + self.contrast) / 2 > 1:
            raise ValueError("photon detection probability per shot exceeds 1")

    @property
    def expected_sigma(self) -> float:
        return 1.0 / (self.contrast * math.sqrt(self.shots_per_point * self.photons_per_shot))

    def with_seed(self, seed: int) -> "NoiseModel":
        from dataclasses import replace

        return replace(self, rng_seed=seed)


@dataclass(eq=False)
class Trace:
    abscissa: np.ndarray
    signal: np.ndarray
    sigma: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.abscissa = np.asarray(self.abscissa, dtype=float)
        self.signal = np.asarray(self.signal, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if not (len(self.abscissa) == len(self.signal) == len(self.sigma)):
            raise ValueError("trace columns must have equal length")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be non-negative")

    def __len__(self):
        return len(self.signal)


class Engine:
    """Propagates sequences for one parameter set, caching event unitaries.

    ``phase_offset`` rotates the nuclear spin about z right before the first
    readout block; it stands in for uncalibrated readout phase errors.
    """

    def __init__(self, hf: HyperfineParams, sys: SystemParams, *, max_phase_step: float = DEFAULT_MAX_PHASE_STEP,
                 phase_offset: float = 0.0):
        self.hf = hf
        self.sys = sys
        self.max_phase_step = max_phase_step
        self.phase_offset = phase_offset
        self._static = spin.EigenPropagator(full_hamiltonian(hf, sys))
        self._h0 = branch_field(0, hf, sys)
        self._h1 = branch_field(-1, hf, sys)
        self._cache: dict = {}
        self._ia = spin.nuclear_operator(math.cos(hf.phi) * spin.IX + math.sin(hf.phi) * spin.IY)
        self._phase_rot = spin.embed(spin.ID2, np.diag(np.exp([-0.5j * phase_offset, 0.5j * phase_offset])))

    # -- event unitaries --
    def unitary(self, ev) -> np.ndarray:
        if isinstance(ev, FreeEvolution):
            key = ("free", ev.duration)
            if key not in self._cache:
                self._cache[key] = self._static(ev.duration)
            return self._cache[key]
        if isinstance(ev, MwRotation):
            key = ("mw", ev.angle, ev.phase, ev.duration)
            if key not in self._cache:
                R = spin.electron_rotation(ev.angle, ev.phase)
                if ev.duration > 0:
                    rabi = ev.angle / ev.duration
                    drive = 0.5 * rabi * (math.cos(ev.phase) * spin.SIGMA_X + math.sin(ev.phase) * spin.SIGMA_Y)
                    H = full_hamiltonian(self.hf, self.sys) + spin.embed(drive, spin.ID2)
                    R = spin.propagator(H, ev.duration)
                self._cache[key] = R
            return self._cache[key]
        if isinstance(ev, RfSegment):
            key = ("rf", id(ev.pulse))
            if key not in self._cache:
                self._cache[key] = (ev.pulse, self.rf_unitary(ev.pulse))
            return self._cache[key][1]
        if isinstance(ev, ReadoutBlock):
            key = ("ro", ev.tau, ev.n_pulses, ev.reversed, ev.pi_duration)
            if key not in self._cache:
                U = np.eye(4, dtype=complex)
                for sub in expand_readout(ev):
                    U = self.unitary(sub) @ U
                self._cache[key] = U
            return self._cache[key]
        raise SequenceError(f"cannot propagate event {ev!r}")

    def unitary_free_ms0(self, dt: float) -> np.ndarray:
        return self._static(dt)[:2, :2]

    def rf_unitary(self, pulse) -> np.ndarray:
        """Piecewise-constant lab-frame propagation through a coil pulse window."""
        B, dts = segment_arrays(pulse, self.max_phase_step)
        if len(dts) == 0:
            return np.eye(4, dtype=complex)
        coil = -self.sys.gamma_n * B
        U0 = spin.ordered_product(spin.su2_propagators(self._h0[None, :] + coil, dts))
        U1 = spin.ordered_product(spin.su2_propagators(self._h1[None, :] + coil, dts))
        U = np.zeros((4, 4), dtype=complex)
        U[:2, :2] = U0
        U[2:, 2:] = U1
        return U

    # -- sequences --
    def initial_state(self) -> np.ndarray:
        return spin.density_matrix(0, self.sys.polarization)

    def run(self, seq: PulseSequence, readout_mode: str = "full", rho0=None) -> float:
        if readout_mode not in READOUT_MODES:
            raise ValueError(f"readout_mode must be one of {READOUT_MODES}")
        rho = self.initial_state() if rho0 is None else rho0
        U = np.eye(4, dtype=complex)
        n_readouts = sum(isinstance(e, ReadoutBlock) for e in seq.events)
        if n_readouts == 0:
            raise SequenceError("sequence has no readout block")
        if readout_mode == "ideal" and n_readouts > 1:
            raise SequenceError("ideal readout mode only applies to single-readout sequences")
        seen_readout = False
        for ev in seq.events:
            if isinstance(ev, ReadoutBlock) and not seen_readout:
                seen_readout = True
                U = self._phase_rot @ U
                if readout_mode == "ideal":
                    rho = spin.evolve(rho, U)
                    return 2.0 * spin.expect(rho, self._ia)
            if isinstance(ev, ElectronDephasing):
                rho = dephase_electron(spin.evolve(rho, U))
                U = np.eye(4, dtype=complex)
                continue
            U = self.unitary(ev) @ U
        rho = spin.evolve(rho, U)
        return spin.expect(rho, _READOUT_Z)


def dephase_electron(rho) -> np.ndarray:
    """Drop electron coherences, keep the block-diagonal part."""
    out = np.zeros_like(rho)
    out[:2, :2] = rho[:2, :2]
    out[2:, 2:] = rho[2:, 2:]
    return out


def run_sequence(seq: PulseSequence, hf: HyperfineParams, sys: SystemParams, readout_mode: str = "full",
                 **engine_kw) -> float:
    """Noiseless signal of one sequence.

    full: propagate every event and return 2 P(mS=0) - 1 after the last
    block. ideal: return 2 <I_a> at the start of the readout block.
    """
    return Engine(hf, sys, **engine_kw).run(seq, readout_mode)


def simulate_signal(experiment: Sequence[PulseSequence], hf, sys, readout_mode="full", workers: Optional[int] = None,
                    **engine_kw) -> np.ndarray:
    eng = Engine(hf, sys, **engine_kw)
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            vals = list(pool.map(lambda s: eng.run(s, readout_mode), experiment))
    else:
        vals = [eng.run(s, readout_mode) for s in experiment]
    return np.clip(np.asarray(vals), -1.0, 1.0)


def point_rngs(seed: int, n: int) -> list:
    """Independent per-point generators so results do not depend on evaluation order."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def apply_noise(signal, noise: NoiseModel):
    """Binomial photon counts in the +/- channels -> (estimate, sigma)."""
    signal = np.asarray(signal, dtype=float)
    n_shots = noise.shots_per_point
    lam, c = noise.photons_per_shot, noise.contrast
    est = np.empty_like(signal)
    sig = np.empty_like(signal)
    norm = n_shots * lam * c
    for i, (s, rng) in enumerate(zip(signal, point_rngs(noise.rng_seed, len(signal)))):
        n_plus = rng.binomial(n_shots, lam * (1 + c * s) / 2)
        n_minus = rng.binomial(n_shots, lam * (1 - c * s) / 2)
        est[i] = (n_plus - n_minus) / norm
        sig[i] = math.sqrt(max(n_plus + n_minus, 1)) / norm
    return np.clip(est, -1.0, 1.0), sig


def simulate_trace(experiment: Sequence[PulseSequence], hf: HyperfineParams, sys: SystemParams,
                   noise: Optional[NoiseModel] = None, readout_mode: str = "full", workers: Optional[int] = None,
                   **engine_kw) -> Trace:
    """Signal for every sequence, optionally with shot noise (deterministic per seed)."""
    experiment = list(experiment)
    clean = simulate_signal(experiment, hf, sys, readout_mode, workers, **engine_kw)
    absc = np.array([s.meta.get("abscissa", i) for i, s in enumerate(experiment)], dtype=float)
    meta = {"kind": experiment[0].meta.get("kind") if experiment else None,
            "abscissa_unit": experiment[0].meta.get("abscissa_unit") if experiment else None,
            "readout_mode": readout_mode}
    if noise is None:
        return Trace(absc, clean, np.zeros_like(clean), meta)
    est, sig = apply_noise(clean, noise)
    meta["noise"] = asdict(noise)
    return Trace(absc, est, sig, meta)


def echo_amplitude_trace(t1, phi_rf_grid, hf, sys, rf_template, cal, readout, noise=None, **engine_kw) -> Trace:
    """Echo signal versus rf phase for the correlation-spectroscopy protocol."""
    from .sequence import echo_experiment

    seqs = echo_experiment(t1, phi_rf_grid, rf_template, cal, readout, sys)
    return simulate_trace(seqs, hf, sys, noise, "full", **engine_kw)


# --- files -----------------------------------------------------------------

TRACE_HEADER = ("abscissa", "signal", "sigma")


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trace_csv_text(trace: Trace) -> str:
    lines = [",".join(TRACE_HEADER)]
    for a, s, e in zip(trace.abscissa, trace.signal, trace.sigma):
        lines.append(f"{float(a)!r},{float(s)!r},{float(e)!r}")
    return "\n".join(lines) + "\n"


def write_trace(path, trace: Trace, sidecar: Optional[dict] = None) -> None:
    atomic_write_text(path, trace_csv_text(trace))
    if sidecar is not None:
        atomic_write_text(str(path) + ".json", json.dumps(sidecar, indent=2, sort_keys=True))


class TraceFormatError(ValueError):
    pass


def read_trace(path) -> Trace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(r.strip() for r in rows[0]) != TRACE_HEADER:
        raise TraceFormatError(f"{path}: line 1: expected header 'abscissa,signal,sigma'")
    cols = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            if len(row) != 3:
                raise ValueError
            vals = [float(x) for x in row]
        except ValueError:
            raise TraceFormatError(f"{path}: line {lineno}: cannot parse {','.join(row)!r}") from None
        if not all(math.isfinite(v) for v in vals) or vals[2] < 0:
            raise TraceFormatError(f"{path}: line {lineno}: invalid values {','.join(row)!r}")
        cols.append(vals)
    if not cols:
        raise TraceFormatError(f"{path}: no data rows")
    arr = np.asarray(cols)
    meta = {}
    side = str(path) + ".json"
    if os.path.exists(side):
        with open(side) as fh:
            meta = json.load(fh)
    return Trace(arr[:, 0], arr[:, 1], arr[:, 2], meta)
