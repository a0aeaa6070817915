"""External rf micro-coil: waveforms, bandwidth-limited distortion, and the
time-resolved ODMR measurement used to calibrate the pulse profile."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lfilter

from .constants import GAMMA_E
from .hamiltonian import FieldSample

ENVELOPES = ("rectangular", "cosine-square")
SETTLING_TIME_CONSTANTS = 10.0


def unit_vector(polar: float, azimuth: float) -> np.ndarray:
    return np.array([
        math.sin(polar) * math.cos(azimuth),
        math.sin(polar) * math.sin(azimuth),
        math.cos(polar),
    ])


@dataclass(frozen=True)
class CoilCalibration:
    direction: tuple = (1.0, 0.0, 0.0)
    field_per_current: float = 5e-3  # T/A
    f3db: float = math.inf  # Hz
    delay: float = 0.0  # s
    direction_uncertainty: float = 0.0  # rad

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("coil direction must be non-zero")
        object.__setattr__(self, "direction", tuple(d / n))
        if self.field_per_current <= 0:
            raise ValueError("field_per_current must be positive")
        if not self.f3db > 0:
            raise ValueError("f3db must be positive")

    @property
    def azimuth(self) -> float:
        return math.atan2(self.direction[1], self.direction[0]) % (2 * math.pi)

    @property
    def polar(self) -> float:
        return math.acos(max(-1.0, min(1.0, self.direction[2])))

    @property
    def time_constant(self) -> float:
        return 0.0 if math.isinf(self.f3db) else 1.0 / (2 * math.pi * self.f3db)

    def rotated(self, delta_azimuth: float) -> "CoilCalibration":
        """Same coil with its field direction rotated about z."""
        return replace(self, direction=tuple(unit_vector(self.polar, self.azimuth + delta_azimuth)))

    def with_delay(self, delay: float) -> "CoilCalibration":
        return replace(self, delay=delay)


@dataclass(frozen=True, eq=False)
class RfPulse:
    """Sampled coil field at the NV site.

    ``t`` starts at 0 and spans the event window: the nominal ``duration``
    plus, after distortion, a settling tail. ``field`` has shape (N, 3) in T.
    """

    carrier_freq: float
    phase: float
    amplitude: float
    envelope: str
    duration: float
    t: np.ndarray
    field: np.ndarray
    distorted: bool = False

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("pulse duration must be positive")
        if self.envelope not in ENVELOPES:
            raise ValueError(f"unknown envelope {self.envelope!r}")
        t = np.asarray(self.t, dtype=float)
        f = np.asarray(self.field, dtype=float).reshape(len(t), 3)
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("samples must be strictly increasing in time")
        t.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "field", f)

    @property
    def window(self) -> float:
        return float(self.t[-1]) if len(self.t) else 0.0

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else self.duration

    @property
    def distorted_samples(self) -> list:
        return [FieldSample(float(ti), tuple(bi)) for ti, bi in zip(self.t, self.field)]

    def scaled(self, factor: float) -> "RfPulse":
        return replace(self, amplitude=self.amplitude * factor, field=self.field * factor)

    def to_dict(self, samples: bool = True) -> dict:
        d = {
            "carrier_freq_Hz": self.carrier_freq,
            "phase_rad": self.phase,
            "amplitude_T": self.amplitude,
            "envelope": self.envelope,
            "duration_s": self.duration,
            "window_s": self.window,
            "distorted": self.distorted,
            "n_samples": len(self.t),
        }
        if samples:
            d["t_s"] = self.t.tolist()
            d["B_T"] = self.field.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RfPulse":
        return cls(
            carrier_freq=d["carrier_freq_Hz"],
            phase=d["phase_rad"],
            amplitude=d["amplitude_T"],
            envelope=d["envelope"],
            duration=d["duration_s"],
            t=np.asarray(d["t_s"]),
            field=np.asarray(d["B_T"]),
            distorted=d.get("distorted", False),
        )


def envelope_values(envelope: str, t, duration: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    inside = (t >= 0) & (t <= duration * (1 + 1e-12))
    if envelope == "rectangular":
        return inside.astype(float)
    if envelope == "cosine-square":
        return np.where(inside, np.sin(np.pi * t / duration) ** 2, 0.0)
    raise ValueError(f"unknown envelope {envelope!r}")


def synthesize(carrier_freq, phase, amplitude, envelope, duration, cal: CoilCalibration, dt) -> RfPulse:
    """Ideal waveform amplitude * env(t) * cos(2 pi f t + phase) along the coil axis."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if carrier_freq > 0 and dt >= 1.0 / (2 * carrier_freq):
        raise ValueError("sampling step violates the Nyquist condition for the carrier")
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = max(1, int(math.ceil(duration / dt - 1e-9)))
    t = np.linspace(0.0, duration, n + 1)
    b = amplitude * envelope_values(envelope, t, duration) * np.cos(2 * math.pi * carrier_freq * t + phase)
    return RfPulse(carrier_freq, phase, amplitude, envelope, duration, t,
                   b[:, None] * np.asarray(cal.direction)[None, :])


def custom_pulse(t, field, carrier_freq: float, duration: Optional[float] = None) -> RfPulse:
    """Wrap arbitrary samples (e.g. a circularly polarized drive) as an RfPulse."""
    t = np.asarray(t, dtype=float)
    return RfPulse(carrier_freq, 0.0, float(np.max(np.abs(field))) if len(t) else 0.0,
                   "rectangular", duration if duration else float(t[-1]), t, np.asarray(field))


def lowpass(x, dt: float, tau: float) -> np.ndarray:
    """First-order low-pass with time constant ``tau``, exact for input that is
    linear between samples. The input is taken as zero before the first sample.
    """
    x = np.asarray(x, dtype=float)
    if tau == 0:
        return x.copy()
    a = math.exp(-dt / tau)
    k = (tau / dt) * (1 - a)
    # y[n+1] = a y[n] + (1 - k) x[n+1] + (k - a) x[n]
    return lfilter([1 - k, k - a], [1.0, -a], x, axis=0)


def apply_distortion(pulse: RfPulse, cal: CoilCalibration) -> RfPulse:
    """Single-pole low-pass at ``cal.f3db`` followed by a pure delay ``cal.delay``.

    The sample grid is kept and extended by a settling tail set by the filter;
    the delay shifts the waveform inside that fixed window.
    """
    tau = cal.time_constant
    dt = pulse.dt
    n_tail = int(math.ceil(SETTLING_TIME_CONSTANTS * tau / dt)) if tau > 0 else 0
    t = np.concatenate([pulse.t, pulse.t[-1] + dt * np.arange(1, n_tail + 1)])
    x = np.concatenate([pulse.field, np.zeros((n_tail, 3))])
    y = lowpass(x, dt, tau)
    if cal.delay:
        y = np.stack([np.interp(t - cal.delay, t, y[:, k], left=0.0, right=0.0) for k in range(3)], axis=1)
    return replace(pulse, t=t, field=y, distorted=True)


# --- ODMR pulse-profile calibration ---------------------------------------

@dataclass(frozen=True, eq=False)
class OdmrSnapshot:
    window_start: float
    window_len: float
    frequencies: np.ndarray
    contrast: np.ndarray

    def __post_init__(self):
        if self.window_len <= 0:
            raise ValueError("window_len must be positive")
        if len(self.frequencies) == 0:
            raise ValueError("spectrum must be non-empty")

    @property
    def spectrum(self) -> list:
        return list(zip(np.asarray(self.frequencies).tolist(), np.asarray(self.contrast).tolist()))

    @property
    def midpoint(self) -> float:
        return self.window_start + 0.5 * self.window_len


def lorentzian_dip(f, center, fwhm, depth, baseline=1.0):
    hw = 0.5 * fwhm
    return baseline - depth * hw * hw / ((np.asarray(f) - center) ** 2 + hw * hw)


def windowed_mean(t, y, start: float, length: float) -> float:
    """Mean of the piecewise-linear signal y(t) over [start, start + length]."""
    t = np.asarray(t)
    y = np.asarray(y)
    grid = np.linspace(start, start + length, 257)
    inner = t[(t > start) & (t < start + length)]
    grid = np.union1d(grid, inner)
    vals = np.interp(grid, t, y, left=0.0, right=0.0)
    return float(np.trapezoid(vals, grid) / length)


def odmr_profile(
    pulse: RfPulse,
    window_len: float,
    probe_grid: Sequence[float],
    linewidth: float,
    noise_sigma: float = 0.0,
    *,
    depth: float = 0.2,
    resonance: float = 0.0,
    gamma_e: float = GAMMA_E,
    t_start: Optional[float] = None,
    t_stop: Optional[float] = None,
    rng=None,
) -> list:
    """Time-resolved ODMR snapshots of the coil field's z component.

    Each window yields a Lorentzian dip at ``resonance + gamma_e <b_z> / 2 pi``.
    Windows tile [t_start, t_stop); defaults cover the pulse window plus one
    window before the pulse.
    """
    if window_len <= 0:
        raise ValueError("window_len must be positive")
    rng = np.random.default_rng(rng)
    probe = np.asarray(probe_grid, dtype=float)
    t0 = -window_len if t_start is None else t_start
    t1 = pulse.window if t_stop is None else t_stop
    n = int(math.floor((t1 - t0) / window_len + 1e-9))
    snaps = []
    for k in range(n):
        start = t0 + k * window_len
        bz = windowed_mean(pulse.t, pulse.field[:, 2], start, window_len)
        center = resonance + gamma_e * bz / (2 * math.pi)
        spec = lorentzian_dip(probe, center, linewidth, depth)
        if noise_sigma > 0:
            spec = spec + rng.normal(0.0, noise_sigma, size=spec.shape)
        snaps.append(OdmrSnapshot(start, window_len, probe.copy(), spec))
    return snaps


@dataclass(frozen=True)
class ProfilePoint:
    t: float
    field: float  # T, z component
    sigma: float
    ok: bool = True
    message: str = ""


def fit_lorentzian(freqs, contrast):
    """Least-squares Lorentzian-dip fit: returns (params, cov, ok, message).

    params = (center, fwhm, depth, baseline).
    """
    f = np.asarray(freqs, dtype=float)
    c = np.asarray(contrast, dtype=float)
    if len(f) < 3:
        return None, None, False, "fewer than 3 spectrum points"
    baseline = float(np.max(c))
    i_min = int(np.argmin(c))
    depth = baseline - float(c[i_min])
    half = c < baseline - 0.5 * depth
    width = (f[half].max() - f[half].min()) if np.count_nonzero(half) > 1 else 3 * np.median(np.diff(np.sort(f)))
    x0 = [f[i_min], max(width, 1e-12), max(depth, 1e-12), baseline]
    scale = np.array([max(width, 1.0), max(width, 1.0), max(depth, 1e-6), 1.0])

    def resid(p):
        return lorentzian_dip(f, p[0], p[1], p[2], p[3]) - c

    try:
        sol = least_squares(resid, x0, x_scale=scale, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    except Exception as exc:  # scipy raises on degenerate input
        return None, None, False, str(exc)
    if not sol.success:
        return sol.x, None, False, sol.message
    dof = max(len(f) - 4, 1)
    chi2 = float(np.sum(sol.fun ** 2)) / dof
    # column scaling keeps the Hz-scale and unit-scale parameters well conditioned
    J = sol.jac
    d = np.linalg.norm(J, axis=0)
    if np.any(d == 0):
        return sol.x, None, False, "singular Jacobian"
    try:
        cov = np.linalg.inv((J / d).T @ (J / d)) / np.outer(d, d) * chi2
    except np.linalg.LinAlgError:
        return sol.x, None, False, "singular Jacobian"
    return sol.x, cov, True, ""


def fit_profile(snapshots, *, resonance: float = 0.0, gamma_e: float = GAMMA_E) -> list:
    """Per-snapshot Lorentzian fit; returns ProfilePoints (t = window midpoint).

    Failed snapshots are flagged with ``ok=False`` and carry NaN values.
    """
    out = []
    for s in snapshots:
        p, cov, ok, msg = fit_lorentzian(s.frequencies, s.contrast)
        if not ok or p is None:
            out.append(ProfilePoint(s.midpoint, math.nan, math.nan, False, str(msg)))
            continue
        conv = 2 * math.pi / gamma_e
        out.append(ProfilePoint(s.midpoint, (p[0] - resonance) * conv, math.sqrt(max(cov[0, 0], 0.0)) * conv))
    return out


# --- CSV waveform interchange ----------------------------------------------

WAVEFORM_COLUMNS = ("t_s", "bx_T", "by_T", "bz_T")


def write_waveform_csv(path, pulse: RfPulse) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WAVEFORM_COLUMNS)
        for ti, b in zip(pulse.t, pulse.field):
            w.writerow([repr(float(ti))] + [repr(float(x)) for x in b])


def read_waveform_csv(path, carrier_freq: float = 0.0, duration: Optional[float] = None) -> RfPulse:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != WAVEFORM_COLUMNS:
        raise ValueError(f"{path}: line 1: expected header {','.join(WAVEFORM_COLUMNS)}")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            if len(row) != 4:
                raise ValueError
            data.append([float(x) for x in row])
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: malformed waveform row {row!r}") from None
    arr = np.asarray(data)
    return custom_pulse(arr[:, 0], arr[:, 1:], carrier_freq, duration)
