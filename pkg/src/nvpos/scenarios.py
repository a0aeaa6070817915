"""Preset simulation scenarios for the three nuclear spins and their calibrations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from . import spin
from .coil import CoilCalibration, RfPulse, unit_vector
from .experiment import Engine, NoiseModel
from .hamiltonian import HyperfineParams, SystemParams, larmor_frequency
from .sequence import (
    PulseTemplate,
    ReadoutBlock,
    calibrate_hf_pi2,
    calibrate_readout,
    echo_experiment,
    hf_pi2_block,
    precession_experiment,
)


class CalibrationError(RuntimeError):
    pass


def _ms0_block(engine: Engine, pulse: RfPulse) -> np.ndarray:
    return engine.rf_unitary(pulse)[:2, :2]


def rf_rotation_angle(engine: Engine, pulse: RfPulse) -> float:
    """Nuclear rotation angle of a coil pulse in the mS=0 manifold (interaction frame)."""
    U = _ms0_block(engine, pulse)
    U0 = engine.unitary_free_ms0(pulse.window)
    V = U0.conj().T @ U
    c = abs(np.trace(V)) / 2
    return 2 * math.acos(min(1.0, c))


def _iz_after(engine: Engine, pulse: RfPulse) -> float:
    U = _ms0_block(engine, pulse)
    up = U[:, 0]
    return 0.5 * (abs(up[0]) ** 2 - abs(up[1]) ** 2)


def calibrate_coil_pi2(template: PulseTemplate, cal: CoilCalibration, hf: HyperfineParams, sys: SystemParams,
                       max_duration: float = 200e-6, step: Optional[float] = None) -> PulseTemplate:
    """Shortest pulse duration that tips a polarized nucleus into the equatorial plane.

    The distorted pulse (including its settling tail) is simulated; the root
    of <Iz>(duration) is bracketed on a grid and refined.
    """
    eng = Engine(hf, sys)
    larmor = larmor_frequency(sys) / (2 * math.pi)
    step = step or max(2.0 / larmor, 20 * template.dt)

    def f(d):
        return _iz_after(eng, template.with_(duration=d).build(cal))

    prev_d, prev = None, 0.5
    d = step
    while d <= max_duration:
        val = f(d)
        if prev_d is not None and val <= 0 < prev:
            root = brentq(f, prev_d, d, xtol=1e-12)
            return template.with_(duration=root)
        prev_d, prev = d, val
        d += step
    raise CalibrationError("coil pulse does not reach a pi/2 rotation within max_duration")


def calibrate_rf_pi(template: PulseTemplate, cal: CoilCalibration, hf: HyperfineParams, sys: SystemParams
                    ) -> PulseTemplate:
    """Amplitude for a pi rotation in the mS=0 manifold at fixed duration."""
    eng = Engine(hf, sys)

    def g(amp):
        return _iz_after(eng, template.with_(amplitude=amp).build(cal)) + 0.5

    # first-order estimate from the co-rotating component, then bracket
    a_perp = math.sin(cal.polar)
    area = 0.5 if template.envelope == "cosine-square" else 1.0
    guess = 2 * math.pi / (sys.gamma_n * a_perp * template.duration * area)
    lo, hi = 0.7 * guess, 1.3 * guess
    res = _minimize_scalar(g, lo, hi)
    return template.with_(amplitude=res)


def _minimize_scalar(fun, lo, hi):
    from scipy.optimize import minimize_scalar

    r = minimize_scalar(fun, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12 * hi})
    return float(r.x)


@dataclass
class Scenario:
    """Everything needed to synthesize and fit one nuclear spin's data."""

    name: str
    hf: HyperfineParams
    sys: SystemParams
    cal: CoilCalibration
    coil_pulse: PulseTemplate
    t1_grid: np.ndarray
    noise: NoiseModel = field(default_factory=NoiseModel)
    readout: Optional[ReadoutBlock] = None
    hf_pi2: Optional[tuple] = None  # (tau, n)
    coil_calibrated: bool = False

    def calibrated(self) -> "Scenario":
        """Fill in readout and hyperfine pi/2 timings from the nominal parameters."""
        out = replace(self)
        if out.readout is None:
            tau, n = calibrate_readout(self.hf, self.sys)
            out.readout = ReadoutBlock(tau, n)
        if out.hf_pi2 is None:
            out.hf_pi2 = calibrate_hf_pi2(self.hf, self.sys)
        if not out.coil_calibrated:
            out.coil_pulse = calibrate_coil_pi2(self.coil_pulse, self.cal, self.hf, self.sys)
            out.coil_calibrated = True
        return out

    def reference_experiment(self):
        tau, n = self.hf_pi2
        return precession_experiment("reference", hf_pi2_block(tau, n), self.t1_grid, self.readout)

    def coil_experiment(self, cal: Optional[CoilCalibration] = None):
        pulse = self.coil_pulse.build(cal or self.cal)
        return precession_experiment("coil", pulse, self.t1_grid, self.readout)


def c1_scenario(**overrides) -> Scenario:
    """Low-field spin: B0 = 9.600 mT, first-generation coil (77 kHz bandwidth)."""
    hf = HyperfineParams.from_khz(18.5, 41.4, 191.0)
    sys = SystemParams.along_z(9.600e-3)
    cal = CoilCalibration(tuple(unit_vector(math.radians(70), math.radians(40))), f3db=77e3)
    pulse = PulseTemplate(larmor_frequency(sys) / (2 * math.pi), 4e-3, 20e-6, "rectangular", dt=10e-9)
    kw = dict(name="C1", hf=hf, sys=sys, cal=cal, coil_pulse=pulse, t1_grid=np.linspace(0, 80e-6, 161),
              readout=ReadoutBlock(1.29224077234771e-05, 16), hf_pi2=(4.716976931278423e-06, 6))
    kw.update(overrides)
    return Scenario(**kw)


def c3_scenario(**overrides) -> Scenario:
    """High-field spin: B0 = 204.902 mT, second-generation coil (1.72 MHz bandwidth)."""
    hf = HyperfineParams.from_khz(98.4, 138.4, 81.0)
    sys = SystemParams.along_z(204.902e-3)
    cal = CoilCalibration(tuple(unit_vector(math.radians(70), math.radians(-25))), f3db=1.72e6)
    pulse = PulseTemplate(larmor_frequency(sys) / (2 * math.pi), 4e-3, 5e-6, "rectangular", dt=2e-9)
    kw = dict(name="C3", hf=hf, sys=sys, cal=cal, coil_pulse=pulse, t1_grid=np.linspace(0, 20e-6, 401),
              readout=ReadoutBlock(2.228006591374205e-07, 24), hf_pi2=None)
    kw.update(overrides)
    return Scenario(**kw)


ECHO_TIME = 31.36e-6  # 2 t1


def c3_echo_setup(t1: float = ECHO_TIME / 2, duration: float = 28e-6):
    """C3 parameters for the echo method: unpolarized nucleus, cosine-square rf pi."""
    sc = c3_scenario()
    sys = sc.sys.with_polarization(0.0)
    cal = replace(sc.cal, f3db=math.inf)
    tpl = PulseTemplate(larmor_frequency(sys) / (2 * math.pi), 1e-5, duration, "cosine-square", dt=2e-9)
    tpl = calibrate_rf_pi(tpl, cal, sc.hf, sys)
    return sc.hf, sys, cal, tpl, sc.readout, t1
