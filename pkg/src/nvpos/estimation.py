"""Levenberg-Marquardt fitting with the simulator as model function."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .experiment import Engine, Trace, simulate_signal
from .hamiltonian import HyperfineParams, SystemParams
from .sequence import (
    PulseTemplate,
    ReadoutBlock,
    echo_experiment,
    hf_pi2_block,
    precession_experiment,
)

TWO_PI = 2 * math.pi
PHI_STARTS = tuple(math.radians(d) for d in (45.0, 135.0, 225.0, 315.0))


class FitError(ValueError):
    pass


class UnidentifiableError(FitError):
    pass


class NoEchoContrastError(FitError):
    pass


@dataclass(frozen=True)
class Parameter:
    name: str
    initial: float
    lower: float = -math.inf
    upper: float = math.inf
    unit: str = ""
    step_floor: float = 1e-8  # absolute floor of the finite-difference step

    def __post_init__(self):
        if not self.lower <= self.initial <= self.upper:
            raise FitError(f"initial value of {self.name!r} lies outside its bounds")


@dataclass(frozen=True)
class FitProblem:
    model: Callable[[dict], np.ndarray]
    data: Trace
    free: tuple
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "free", tuple(self.free))
        names = [p.name for p in self.free]
        if not names:
            raise FitError("at least one free parameter is required")
        if len(set(names)) != len(names):
            raise FitError("duplicate free parameter names")
        if set(names) & set(self.fixed):
            raise FitError(f"parameters both free and fixed: {sorted(set(names) & set(self.fixed))}")
        if len(self.data) < len(names):
            raise FitError("fewer data points than free parameters")

    @property
    def names(self) -> list:
        return [p.name for p in self.free]

    def params(self, x) -> dict:
        d = dict(self.fixed)
        d.update(zip(self.names, map(float, x)))
        return d

    def predict(self, x) -> np.ndarray:
        return np.asarray(self.model(self.params(x)), dtype=float)


@dataclass
class FitResult:
    names: list
    estimates: dict
    sigma: dict
    covariance: np.ndarray
    chi2_reduced: float
    converged: bool
    n_iterations: int
    n_accepted: int = 0
    cost_history: list = field(default_factory=list)
    units: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def interval(self, name: str, k: float = 2.0) -> tuple:
        v, s = self.estimates[name], self.sigma[name]
        return v - k * s, v + k * s

    def to_dict(self) -> dict:
        return _jsonable({
            "parameters": self.names,
            "units": self.units,
            "estimates": self.estimates,
            "sigma": self.sigma,
            "covariance": self.covariance,
            "chi2_reduced": self.chi2_reduced,
            "converged": self.converged,
            "n_iterations": self.n_iterations,
            "extras": self.extras,
            "config": self.config,
        })

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, **kw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


# --- core solver -----------------------------------------------------------

def _weights(trace: Trace) -> np.ndarray:
    s = trace.sigma
    if np.all(s == 0):
        return np.ones_like(s)
    if np.any(s <= 0):
        raise FitError("sigma must be positive for every point (or zero everywhere for unit weights)")
    return 1.0 / s


def _jacobian(problem: FitProblem, x, w, pool=None) -> np.ndarray:
    steps = np.array([max(1e-6 * abs(v), p.step_floor) for v, p in zip(x, problem.free)])
    points = []
    for i, h in enumerate(steps):
        e = np.zeros_like(x)
        e[i] = h
        points += [x + e, x - e]
    preds = list(pool.map(problem.predict, points)) if pool else [problem.predict(p) for p in points]
    cols = [(preds[2 * i] - preds[2 * i + 1]) / (2 * h) for i, h in enumerate(steps)]
    return np.column_stack(cols) * w[:, None]


def _clip(x, lo, hi):
    return np.minimum(np.maximum(x, lo), hi)


def levenberg_marquardt(problem: FitProblem, max_iterations: int = 200, ftol: float = 1e-10, xtol: float = 1e-12,
                        lambda_start: float = 1e-3, workers: Optional[int] = None) -> FitResult:
    """Minimize sum(((data - model) / sigma)^2).

    The first trial step is pure Gauss-Newton; after a rejection the damping
    restarts at ``lambda_start``. Damping is multiplied by 10 on rejection and
    divided by 10 on acceptance (Marquardt diagonal scaling).
    """
    y = problem.data.signal
    w = _weights(problem.data)
    lo = np.array([p.lower for p in problem.free])
    hi = np.array([p.upper for p in problem.free])
    x = np.array([p.initial for p in problem.free], dtype=float)
    floors = np.array([p.step_floor for p in problem.free])

    pool = ThreadPoolExecutor(workers) if workers and workers > 1 else None
    try:
        r = (y - problem.predict(x)) * w
        cost = float(r @ r)
        history = [cost]
        floor_cost = 1e-18 * float((y * w) @ (y * w))  # exact fit up to finite-difference round-off
        lam = 0.0
        converged = False
        it = accepted = 0
        J = None
        while it < max_iterations:
            it += 1
            if cost <= floor_cost:
                converged = True
                break
            if J is None:
                J = -_jacobian(problem, x, w, pool)  # Jacobian of the residual
            A = J.T @ J
            g = -J.T @ r
            D = np.maximum(np.diag(A), 1e-300)
            while True:
                try:
                    delta = np.linalg.solve(A + lam * np.diag(D), g)
                except np.linalg.LinAlgError:
                    delta = np.linalg.lstsq(A + lam * np.diag(D), g, rcond=None)[0]
                xn = _clip(x + delta, lo, hi)
                rn = (y - problem.predict(xn)) * w
                cn = float(rn @ rn)
                step = np.linalg.norm((xn - x) / (np.abs(x) + floors))
                if cn <= cost:
                    rel = (cost - cn) / cost if cost > 0 else 0.0
                    x, r, cost = xn, rn, cn
                    history.append(cost)
                    accepted += 1
                    lam = lam / 10 if lam > 1e-12 else 0.0
                    J = None
                    if rel < ftol or step < xtol or cost <= floor_cost:
                        converged = True
                    break
                lam = lam * 10 if lam > 0 else lambda_start
                if step < xtol or lam > 1e16:
                    converged = True  # no downhill step left at this resolution
                    break
                it += 1
                if it >= max_iterations:
                    break
            if converged:
                break
        Jf = _jacobian(problem, x, w, pool)
    finally:
        if pool:
            pool.shutdown()

    n, m = len(y), len(x)
    dof = max(n - m, 1)
    chi2_red = cost / dof
    cov = _covariance(Jf, problem.names) * chi2_red
    sig = np.sqrt(np.clip(np.diag(cov), 0, None))
    return FitResult(
        names=problem.names,
        estimates=dict(zip(problem.names, map(float, x))),
        sigma=dict(zip(problem.names, map(float, sig))),
        covariance=cov,
        chi2_reduced=float(chi2_red),
        converged=converged,
        n_iterations=it,
        n_accepted=accepted,
        cost_history=history,
        units={p.name: p.unit for p in problem.free},
        extras={"cost": cost, "dof": dof, "residual_rms": float(np.sqrt(np.mean(
            (y - problem.predict(x)) ** 2)))},
    )


def _covariance(Jw, names) -> np.ndarray:
    """(J^T W J)^-1 with an SVD rank check on the weighted Jacobian."""
    # column scaling makes the rank test unit-independent
    scale = np.linalg.norm(Jw, axis=0)
    if np.any(scale == 0):
        bad = [nm for nm, s in zip(names, scale) if s == 0]
        raise UnidentifiableError(f"unidentifiable parameters (no effect on the model): {bad}")
    Js = Jw / scale
    U, s, Vt = np.linalg.svd(Js, full_matrices=False)
    if s[-1] < 1e-9 * s[0]:
        v = np.abs(Vt[-1])
        bad = [nm for nm, c in zip(names, v) if c > 0.1]
        raise UnidentifiableError(f"unidentifiable parameter combination: {bad}")
    inv = (Vt.T / s ** 2) @ Vt
    cov = inv / np.outer(scale, scale)
    return 0.5 * (cov + cov.T)


def wrap_angle(phi: float) -> float:
    return float(phi % TWO_PI)


# --- precession fits -------------------------------------------------------

def reference_model(t1_grid, hf, sys, readout: ReadoutBlock, hf_pi2: tuple, readout_mode="full"):
    tau, n = hf_pi2
    seqs = precession_experiment("reference", hf_pi2_block(tau, n), t1_grid, readout)

    def model(p):
        s = sys.with_B0_magnitude(p["B0"])
        sim = simulate_signal(seqs, hf, s, readout_mode, phase_offset=p.get("phase_offset", 0.0))
        return p["offset"] + p["amplitude"] * sim

    return model


def fit_reference(trace: Trace, hf: HyperfineParams, sys: SystemParams, readout: ReadoutBlock, hf_pi2: tuple,
                  readout_mode: str = "full", **lm_kw) -> FitResult:
    """Stage 1: B0 magnitude from the hyperfine-pi/2 reference trace.

    Amplitude, offset and a readout phase offset are nuisance parameters.
    """
    model = reference_model(trace.abscissa, hf, sys, readout, hf_pi2, readout_mode)
    b0 = sys.B0_magnitude
    best = None
    for eta in (0.0, math.pi / 2, math.pi, 3 * math.pi / 2):
        problem = FitProblem(model, trace, (
            Parameter("B0", b0, 0.5 * b0, 1.5 * b0, "T", 1e-9),
            Parameter("amplitude", 1.0, unit="1", step_floor=1e-6),
            Parameter("offset", 0.0, unit="1", step_floor=1e-6),
            Parameter("phase_offset", eta, unit="rad", step_floor=1e-6),
        ))
        res = levenberg_marquardt(problem, **lm_kw)
        if best is None or res.extras["cost"] < best.extras["cost"] * (1 - 1e-9):
            best = res
        if best.extras["cost"] <= 1.5 * len(trace) and eta == 0.0:
            break  # acceptable fit from the natural start
    _normalize_sign(best, "phase_offset")
    best.extras["stage"] = "reference"
    return best


def _normalize_sign(res: FitResult, phase_name: str):
    """Map (A < 0, eta) to the equivalent (A > 0, eta + pi)."""
    if res.estimates["amplitude"] < 0:
        res.estimates["amplitude"] *= -1
        res.estimates[phase_name] += math.pi
        i = res.names.index("amplitude")
        for j in range(len(res.names)):
            if j != i:
                res.covariance[i, j] *= -1
                res.covariance[j, i] *= -1
    res.estimates[phase_name] = wrap_angle(res.estimates[phase_name])


def coil_model(t1_grid, hf, sys, pulse, readout, phase_offset=0.0, readout_mode="full"):
    seqs = precession_experiment("coil", pulse, t1_grid, readout)

    def model(p):
        h = hf.with_phi(p["phi"])
        s = sys.with_B0_magnitude(p["B0"]) if "B0" in p else sys
        sim = simulate_signal(seqs, h, s, readout_mode, phase_offset=p.get("phase_offset", phase_offset))
        return p["offset"] + p["amplitude"] * sim

    return model


def fit_azimuth(trace: Trace, hf: HyperfineParams, sys: SystemParams, pulse, readout: ReadoutBlock,
                stage1: Optional[FitResult] = None, readout_mode: str = "full", coil_angle_sigma: float = 0.0,
                starts: Sequence[float] = PHI_STARTS, **lm_kw) -> FitResult:
    """Stage 2: azimuth phi from a coil-pi/2 precession trace with B0 fixed.

    ``pulse`` is the calibrated (distorted) coil waveform. With ``stage1``
    given, its B0 and readout phase offset are held fixed and their
    covariance is propagated into the reported phi uncertainty; the coil
    angle calibration error is added in quadrature.
    """
    fixed = {}
    if stage1 is not None:
        fixed = {"B0": stage1.estimates["B0"], "phase_offset": stage1.estimates["phase_offset"]}
    else:
        fixed = {"B0": sys.B0_magnitude, "phase_offset": 0.0}
    model = coil_model(trace.abscissa, hf, sys, pulse, readout, readout_mode=readout_mode)
    best = None
    candidates = []
    for phi0 in starts:
        problem = FitProblem(model, trace, (
            Parameter("phi", phi0, unit="rad", step_floor=1e-6),
            Parameter("amplitude", 1.0, unit="1", step_floor=1e-6),
            Parameter("offset", 0.0, unit="1", step_floor=1e-6),
        ), fixed)
        res = levenberg_marquardt(problem, **lm_kw)
        candidates.append((wrap_angle(res.estimates["phi"]), res.extras["cost"]))
        if res.estimates["amplitude"] > 0 and (best is None or res.extras["cost"] < best.extras["cost"]):
            best = res
    if best is None:
        raise FitError("no start converged to a positive signal amplitude")
    best.estimates["phi"] = wrap_angle(best.estimates["phi"])
    best.extras["starts"] = [{"phi": c, "cost": k} for c, k in candidates]
    best.extras["sigma_fit"] = dict(best.sigma)
    cov = best.covariance.copy()
    if stage1 is not None:
        cov = cov + _stage1_contribution(problem, best, stage1)
    i = best.names.index("phi")
    cov[i, i] += coil_angle_sigma ** 2
    best.covariance = cov
    best.sigma = dict(zip(best.names, map(float, np.sqrt(np.clip(np.diag(cov), 0, None)))))
    best.extras["stage"] = "azimuth"
    best.extras["fixed"] = fixed
    best.extras["coil_angle_sigma"] = coil_angle_sigma
    return best


def _stage1_contribution(problem: FitProblem, res: FitResult, stage1: FitResult) -> np.ndarray:
    """Covariance of the stage-2 estimates induced by the stage-1 fixed values.

    dtheta/deta = -(Jt^T W Jt)^-1 Jt^T W Je, cov = S C_eta S^T.
    """
    eta_names = ["B0", "phase_offset"]
    w = _weights(problem.data)
    x = np.array([res.estimates[n] for n in problem.names])
    Jt = _jacobian(problem, x, w)
    full = FitProblem(problem.model, problem.data,
                      tuple(Parameter(n, stage1.estimates[n], step_floor=1e-9 if n == "B0" else 1e-6)
                            for n in eta_names),
                      {n: res.estimates[n] for n in problem.names})
    Je = _jacobian(full, np.array([stage1.estimates[n] for n in eta_names]), w)
    S = -np.linalg.solve(Jt.T @ Jt, Jt.T @ Je)
    idx = [stage1.names.index(n) for n in eta_names]
    Ce = stage1.covariance[np.ix_(idx, idx)]
    out = S @ Ce @ S.T
    return 0.5 * (out + out.T)


# --- echo fits -------------------------------------------------------------

def _check_echo_grid(phi_rf):
    phi_rf = np.asarray(phi_rf, dtype=float)
    if len(phi_rf) < 6:
        raise FitError("echo fit needs at least 6 phase points")
    if np.ptp(phi_rf) < math.pi * (1 - 1e-9):
        raise FitError("echo phase points must span at least 180 degrees")


def _linear_echo(trace: Trace):
    x = trace.abscissa
    X = np.column_stack([np.cos(2 * x), np.sin(2 * x), np.ones_like(x)])
    w = _weights(trace)
    Xw = X * w[:, None]
    coef, *_ = np.linalg.lstsq(Xw, trace.signal * w, rcond=None)
    resid = (trace.signal - X @ coef) * w
    dof = max(len(x) - 3, 1)
    scale = float(resid @ resid) / dof
    cov = np.linalg.pinv(Xw.T @ Xw) * scale
    A = math.hypot(coef[0], coef[1])
    phi = 0.5 * math.atan2(coef[1], coef[0])
    if A > 0:
        u = np.array([coef[0], coef[1]]) / A
        var_a = float(u @ cov[:2, :2] @ u)
    else:
        var_a = float(np.trace(cov[:2, :2]) / 2)
    return A, phi, coef[2], math.sqrt(max(var_a, 0.0))


def fit_echo_phase(trace: Trace, method: str = "cosine", *, context: Optional[dict] = None, **lm_kw) -> FitResult:
    """phi modulo 180 deg from an echo trace versus rf phase.

    cosine: s = A cos(2 phi_rf - 2 phi) + c with A > 0.
    density-matrix: simulator model; ``context`` supplies hf, sys, cal,
    template, readout and t1 (see :func:`echo_model`).
    """
    _check_echo_grid(trace.abscissa)
    A0, phi0, c0, sig_a = _linear_echo(trace)
    if A0 <= 2 * sig_a or A0 == 0:
        raise NoEchoContrastError("no echo contrast: amplitude is consistent with zero")
    if method == "cosine":
        def model(p):
            return p["amplitude"] * np.cos(2 * trace.abscissa - 2 * p["phi"]) + p["offset"]

        problem = FitProblem(model, trace, (
            Parameter("phi", phi0, unit="rad", step_floor=1e-7),
            Parameter("amplitude", A0, unit="1", step_floor=1e-8),
            Parameter("offset", c0, unit="1", step_floor=1e-8),
        ))
        res = levenberg_marquardt(problem, **lm_kw)
        if res.estimates["amplitude"] < 0:
            res.estimates["amplitude"] *= -1
            res.estimates["phi"] += math.pi / 2
    elif method in ("density-matrix", "dm"):
        if context is None:
            raise FitError("density-matrix echo fit needs a simulation context")
        model = echo_model(trace.abscissa, **context)
        best = None
        for start in (phi0, phi0 + math.pi / 2):
            problem = FitProblem(model, trace, (
                Parameter("phi", start, unit="rad", step_floor=1e-6),
                Parameter("amplitude", 1.0, unit="1", step_floor=1e-6),
                Parameter("offset", 0.0, unit="1", step_floor=1e-6),
            ))
            r = levenberg_marquardt(problem, **lm_kw)
            if r.estimates["amplitude"] > 0 and (best is None or r.extras["cost"] < best.extras["cost"]):
                best = r
        if best is None:
            raise FitError("density-matrix echo fit found no positive-amplitude solution")
        res = best
    else:
        raise FitError(f"unknown echo fit method {method!r}")
    phi = res.estimates["phi"] % math.pi
    res.estimates["phi"] = phi
    res.extras["candidates"] = [phi, phi + math.pi]
    res.extras["method"] = method
    res.extras["stage"] = "echo"
    return res


def echo_model(phi_rf_grid, hf, sys, cal, template: PulseTemplate, readout: ReadoutBlock, t1: float):
    seqs = echo_experiment(t1, phi_rf_grid, template, cal, readout, sys)

    def model(p):
        sim = simulate_signal(seqs, hf.with_phi(p["phi"]), sys)
        return p["offset"] + p["amplitude"] * sim

    return model
