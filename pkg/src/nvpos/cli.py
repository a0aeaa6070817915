"""Command-line entry point: simulate, fit, invert, odmr-calibrate."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from typing import Optional

import numpy as np

from . import __version__
from .coil import CoilCalibration, apply_distortion, fit_profile, odmr_profile, unit_vector
from .config import ConfigError, RunConfig, config_dict, load_config
from .estimation import FitError, fit_azimuth, fit_echo_phase, fit_reference
from .experiment import (
    NoiseModel,
    Trace,
    TraceFormatError,
    atomic_write_text,
    read_trace,
    simulate_trace,
    trace_csv_text,
)
from .geometry import (
    ANGSTROM,
    InversionError,
    assemble_position,
    lattice_sites,
    match_site,
    polar_plot_csv,
    position_json,
)
from .hamiltonian import HyperfineParams, SystemParams, larmor_frequency
from .scenarios import CalibrationError, calibrate_coil_pi2, calibrate_rf_pi
from .sequence import (
    PulseTemplate,
    ReadoutBlock,
    SequenceError,
    calibrate_hf_pi2,
    calibrate_readout,
    echo_experiment,
    hf_pi2_block,
    precession_experiment,
)

log = logging.getLogger("nvpos")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ConfigError, TraceFormatError, InversionError, FitError, SequenceError, CalibrationError,
               FileNotFoundError)


class UserError(Exception):
    pass


# --- config -> library objects ---------------------------------------------

def build_system(cfg: RunConfig) -> SystemParams:
    s = cfg.system
    return SystemParams(s.B0_vector, s.gamma_n, s.gamma_e, s.polarization)


def build_hf(cfg: RunConfig) -> HyperfineParams:
    return HyperfineParams.from_khz(cfg.spin.a_par_khz, cfg.spin.a_perp_khz, cfg.spin.phi_deg)


def build_cal(cfg: RunConfig) -> CoilCalibration:
    c = cfg.coil
    return CoilCalibration(tuple(unit_vector(math.radians(c.polar_deg), math.radians(c.azimuth_deg))),
                           c.field_per_current_T_per_A, c.f3db_hz if c.f3db_hz else math.inf, c.delay_s,
                           math.radians(c.angle_uncertainty_deg))


def build_template(cfg: RunConfig, sys_: SystemParams) -> PulseTemplate:
    p = cfg.coil.pulse
    carrier = p.carrier_hz if p.carrier_hz is not None else larmor_frequency(sys_) / (2 * math.pi)
    return PulseTemplate(carrier, p.amplitude_T, p.duration_s or 1e-6, p.envelope, p.phase_rad, p.dt_s)


def resolve_timings(cfg: RunConfig, hf, sys_) -> dict:
    """Readout and hyperfine pi/2 timings, calibrated when not given."""
    pr = cfg.protocol
    if pr.readout_tau_s is not None:
        ro = (pr.readout_tau_s, pr.readout_n_pulses)
    else:
        ro = calibrate_readout(hf, sys_)
    if pr.hf_pi2_tau_s is not None:
        pi2 = (pr.hf_pi2_tau_s, pr.hf_pi2_n_pulses)
    elif pr.kind == "echo":
        pi2 = None
    else:
        pi2 = calibrate_hf_pi2(hf, sys_)
    return {"readout": (float(ro[0]), int(ro[1])), "hf_pi2": None if pi2 is None else (float(pi2[0]), int(pi2[1]))}


def resolve_pulse(cfg: RunConfig, hf, sys_, cal) -> PulseTemplate:
    tpl = build_template(cfg, sys_)
    if cfg.coil.pulse.duration_s is not None:
        return tpl
    if cfg.protocol.kind == "echo":
        raise ConfigError("echo protocol: coil.pulse.duration_s is required (the amplitude is calibrated)")
    return calibrate_coil_pi2(tpl, cal, hf, sys_)


def t1_grid(cfg: RunConfig) -> np.ndarray:
    pr = cfg.protocol
    return np.linspace(pr.t1_start_s, pr.t1_stop_s, pr.t1_points)


def phi_rf_grid(cfg: RunConfig) -> np.ndarray:
    n = cfg.protocol.phi_rf_points
    return 2 * math.pi * np.arange(n) / n


def _paths(out_dir: str, prefix: str, name: str) -> str:
    return os.path.join(out_dir, f"{prefix}_{name}.csv")


def _seeds(seed: int, n: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _noise(cfg: RunConfig, seed: int) -> Optional[NoiseModel]:
    if cfg.noise is None:
        return None
    n = cfg.noise
    return NoiseModel(n.photons_per_shot, n.contrast, n.shots_per_point, seed)


def _sidecar(cfg: RunConfig, seed: int, extra: dict) -> dict:
    d = {"config": config_dict(cfg), "rng_seed": seed, "version": __version__,
         "units": {"time": "s", "angle": "rad", "field": "T", "frequency": "Hz", "coupling_input": "kHz (x 2 pi)"}}
    d.update(extra)
    return d


# --- commands --------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out_dir: str, seed: int) -> list:
    """Write trace CSVs (plus JSON sidecars); returns the written paths."""
    sys_ = build_system(cfg)
    hf = build_hf(cfg)
    timings = resolve_timings(cfg, hf, sys_)
    ro = ReadoutBlock(*timings["readout"])
    prefix = cfg.output.prefix
    outputs = []  # (name, trace, extra) computed fully before any write
    kind = cfg.protocol.kind
    s_ref, s_coil = _seeds(seed, 2)
    extra = {"timings": timings}
    if kind in ("reference", "coil-precession"):
        tau, n = timings["hf_pi2"]
        seqs = precession_experiment("reference", hf_pi2_block(tau, n), t1_grid(cfg), ro)
        tr = simulate_trace(seqs, hf, sys_, _noise(cfg, s_ref), cfg.readout_mode)
        outputs.append(("reference", tr, {"trace_seed": s_ref}))
    if kind == "coil-precession":
        cal = build_cal(cfg)
        tpl = resolve_pulse(cfg, hf, sys_, cal)
        seqs = precession_experiment("coil", tpl.build(cal), t1_grid(cfg), ro)
        tr = simulate_trace(seqs, hf, sys_, _noise(cfg, s_coil), cfg.readout_mode)
        extra["coil_pulse"] = tpl.__dict__
        outputs.append(("coil", tr, {"trace_seed": s_coil}))
    if kind == "echo":
        cal = build_cal(cfg)
        tpl = calibrate_rf_pi(build_template(cfg, sys_), cal, hf, sys_)
        seqs = echo_experiment(cfg.protocol.echo_t1_s, phi_rf_grid(cfg), tpl, cal, ro, sys_)
        tr = simulate_trace(seqs, hf, sys_, _noise(cfg, s_ref))
        extra["rf_pi_pulse"] = tpl.__dict__
        outputs.append(("echo", tr, {"trace_seed": s_ref}))
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, tr, ex in outputs:
        path = _paths(out_dir, prefix, name)
        side = _sidecar(cfg, seed, {**extra, **ex, "trace": name, "trace_meta": tr.meta})
        atomic_write_text(path, trace_csv_text(tr))
        atomic_write_text(path + ".json", json.dumps(_clean(side), indent=2, sort_keys=True))
        written.append(path)
    return written


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _timings_from(meta: dict) -> Optional[dict]:
    """Timings recorded in a trace sidecar, so fits reuse the simulated sequence."""
    t = meta.get("timings") if meta else None
    if not t:
        return None
    return {"readout": tuple(t["readout"]), "hf_pi2": tuple(t["hf_pi2"]) if t.get("hf_pi2") else None}


def _template_from(meta: dict, key: str) -> Optional[PulseTemplate]:
    d = meta.get(key) if meta else None
    return PulseTemplate(**d) if d else None


def _trace_path(cfg, out_dir, explicit, name):
    return explicit if explicit else _paths(out_dir, cfg.output.prefix, name)


def cmd_fit(cfg: RunConfig, out_dir: str, seed: int, stream=None) -> str:
    stream = stream or sys.stdout
    sys_ = build_system(cfg)
    hf = build_hf(cfg)
    if cfg.fit.B0_initial_T:
        sys_ = sys_.with_B0_magnitude(cfg.fit.B0_initial_T)
    kind = cfg.protocol.kind
    result = {}
    if kind == "echo":
        path = _trace_path(cfg, out_dir, cfg.fit.echo_trace, "echo")
        if not os.path.exists(path):
            raise UserError(f"echo trace {path} not found; run 'simulate' with the echo protocol first")
        trace = read_trace(path)
        ctx = None
        if cfg.fit.echo_method == "density-matrix":
            timings = _timings_from(trace.meta) or resolve_timings(cfg, hf, sys_)
            cal = build_cal(cfg)
            tpl = (_template_from(trace.meta, "rf_pi_pulse")
                   or calibrate_rf_pi(build_template(cfg, sys_), cal, hf, sys_))
            ctx = dict(hf=hf, sys=sys_, cal=cal, template=tpl, readout=ReadoutBlock(*timings["readout"]),
                       t1=cfg.protocol.echo_t1_s)
        res = fit_echo_phase(trace, cfg.fit.echo_method, context=ctx)
        c1, c2 = (math.degrees(c) for c in res.extras["candidates"])
        s2 = 2 * math.degrees(res.sigma["phi"])
        print(f"phi candidates: {c1:.2f} deg and {c2:.2f} deg (2 sigma = {s2:.2f} deg)", file=stream)
        result["echo"] = res.to_dict()
    else:
        ref_path = _trace_path(cfg, out_dir, cfg.fit.reference_trace, "reference")
        if not os.path.exists(ref_path):
            raise UserError(f"reference trace {ref_path} not found; run stage 1 first "
                            "('simulate' with the reference protocol) to fit B0")
        ref = read_trace(ref_path)
        timings = _timings_from(ref.meta) or resolve_timings(cfg, hf, sys_)
        ro = ReadoutBlock(*timings["readout"])
        r1 = fit_reference(ref, hf, sys_, ro, timings["hf_pi2"], cfg.readout_mode)
        b0, sb0 = r1.estimates["B0"], r1.sigma["B0"]
        print(f"B0 = {b0 * 1e3:.6f} mT (2 sigma = {2 * sb0 * 1e6:.2f} uT)", file=stream)
        result["reference"] = r1.to_dict()
        if kind == "coil-precession":
            coil_path = _trace_path(cfg, out_dir, cfg.fit.coil_trace, "coil")
            if not os.path.exists(coil_path):
                raise UserError(f"coil trace {coil_path} not found")
            coil = read_trace(coil_path)
            cal = build_cal(cfg)
            tpl = _template_from(coil.meta, "coil_pulse") or resolve_pulse(cfg, hf, sys_.with_B0_magnitude(b0), cal)
            r2 = fit_azimuth(coil, hf.with_phi(0.0), sys_.with_B0_magnitude(b0), tpl.build(cal), ro, stage1=r1,
                             readout_mode=cfg.readout_mode, coil_angle_sigma=cal.direction_uncertainty)
            phi, s = math.degrees(r2.estimates["phi"]), math.degrees(r2.sigma["phi"])
            print(f"phi = {phi:.2f} deg (2 sigma = {2 * s:.2f} deg)", file=stream)
            result["azimuth"] = r2.to_dict()
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{cfg.output.prefix}_fit.json")
    atomic_write_text(path, json.dumps(_clean(_sidecar(cfg, seed, {"results": result})), indent=2, sort_keys=True))
    return path


def cmd_invert(a_par_khz: float, a_perp_khz: float, phi_deg: float, out_dir: str, *, sigma_a_par_khz=0.0,
               sigma_a_perp_khz=0.0, sigma_phi_deg=0.0, lattice_tolerance: Optional[float] = None,
               ambiguous_180: bool = False, sys_: Optional[SystemParams] = None, label: str = "nucleus",
               cfg: Optional[RunConfig] = None, seed: Optional[int] = None, stream=None) -> str:
    """lattice_tolerance in angstrom; None skips lattice matching."""
    stream = stream or sys.stdout
    sys_ = sys_ or SystemParams.along_z(0.01)
    k = 2 * math.pi * 1e3
    pos = assemble_position(a_par_khz * k, a_perp_khz * k, math.radians(phi_deg), sys_, sigma_a_par_khz * k,
                            sigma_a_perp_khz * k, math.radians(sigma_phi_deg))
    match = None
    extra = {"inputs": {"a_par_khz": a_par_khz, "a_perp_khz": a_perp_khz, "phi_deg": phi_deg,
                        "sigma_a_par_khz": sigma_a_par_khz, "sigma_a_perp_khz": sigma_a_perp_khz,
                        "sigma_phi_deg": sigma_phi_deg, "lattice_tolerance_angstrom": lattice_tolerance,
                        "ambiguous_180": ambiguous_180},
             "config": config_dict(cfg) if cfg else None, "rng_seed": seed}
    if lattice_tolerance is not None:
        sites = lattice_sites(max(pos.r + lattice_tolerance * ANGSTROM, ANGSTROM) + 2 * ANGSTROM)
        match = match_site(pos, sites, lattice_tolerance * ANGSTROM, ambiguous_180)
        if ambiguous_180:
            extra["matches_per_candidate"] = [
                (lambda m: m.to_dict() if m else "none")(match_site(replace(pos, phi=p), sites,
                                                                    lattice_tolerance * ANGSTROM))
                for p in pos.phi_candidates]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "position.json")
    atomic_write_text(path, position_json(pos, match, extra))
    plot = os.path.join(out_dir, "polar_plot.csv")
    atomic_write_text(plot, polar_plot_csv([(label, pos)]))
    atomic_write_text(plot + ".json", json.dumps(_clean({**extra, "label": label}), indent=2, sort_keys=True))
    print(f"r = {pos.r / ANGSTROM:.3f} A, theta = {math.degrees(pos.theta):.2f} deg, "
          f"rho = {pos.rho / ANGSTROM:.3f} A, z = {pos.z / ANGSTROM:.3f} A, phi = {math.degrees(pos.phi):.2f} deg",
          file=stream)
    if lattice_tolerance is not None:
        print(f"lattice match: {match.site.index if match else 'none'}", file=stream)
    return path


def cmd_odmr_calibrate(cfg: RunConfig, out_dir: str, seed: int) -> str:
    if cfg.coil is None:
        raise UserError("odmr-calibrate needs a coil section")
    sys_ = build_system(cfg)
    cal = build_cal(cfg)
    tpl = build_template(cfg, sys_)
    pulse = tpl.build(cal)
    o = cfg.odmr
    span = o.probe_span_hz
    peak = sys_.gamma_e * cfg.coil.pulse.amplitude_T / (2 * math.pi)
    probe = np.linspace(-span / 2 - peak, span / 2 + peak, o.probe_points)
    snaps = odmr_profile(pulse, o.window_s, probe, o.linewidth_hz, o.noise_sigma, gamma_e=sys_.gamma_e, rng=seed)
    prof = fit_profile(snaps, gamma_e=sys_.gamma_e)
    lines = ["t_s,field_T,sigma_T,ok,message"]
    for p in prof:
        msg = p.message.replace(",", ";").replace("\n", " ")
        lines.append(f"{float(p.t)!r},{float(p.field)!r},{float(p.sigma)!r},{int(p.ok)},{msg}")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{cfg.output.prefix}_odmr_profile.csv")
    atomic_write_text(path, "\n".join(lines) + "\n")
    atomic_write_text(path + ".json", json.dumps(_clean(_sidecar(cfg, seed, {"pulse": tpl.__dict__})), indent=2,
                                                 sort_keys=True))
    return path


# --- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nvpos", description="NV-center nuclear spin azimuth positioning")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override rng_seed")
        p.add_argument("--out-dir", default=None, help="override output.dir")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("simulate", help="synthesize trace files")
    common(p)
    p.add_argument("--readout-mode", choices=("full", "ideal"), default=None)
    p = sub.add_parser("fit", help="fit traces (stage 1 and 2, or echo)")
    common(p)
    p.add_argument("--readout-mode", choices=("full", "ideal"), default=None)
    p = sub.add_parser("invert", help="hyperfine couplings + phi -> position")
    common(p, config_required=False)
    p.add_argument("--a-par-khz", type=float, required=True)
    p.add_argument("--a-perp-khz", type=float, required=True)
    p.add_argument("--phi-deg", type=float, required=True)
    p.add_argument("--sigma-a-par-khz", type=float, default=0.0)
    p.add_argument("--sigma-a-perp-khz", type=float, default=0.0)
    p.add_argument("--sigma-phi-deg", type=float, default=0.0)
    p.add_argument("--lattice-tolerance", type=float, default=None, help="match radius in angstrom")
    p.add_argument("--ambiguous-180", action="store_true", help="match both phi and phi + 180 deg")
    p.add_argument("--label", default="nucleus")
    p = sub.add_parser("odmr-calibrate", help="simulate and fit time-resolved ODMR of the coil pulse")
    common(p)
    return ap


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    upd = {}
    if getattr(args, "readout_mode", None):
        upd["readout_mode"] = args.readout_mode
    if args.seed is not None:
        upd["rng_seed"] = args.seed
    return cfg.model_copy(update=upd) if upd else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else None
        if cfg is not None:
            cfg = _apply_overrides(cfg, args)
        out_dir = args.out_dir or (cfg.output.dir if cfg else "out")
        seed = cfg.rng_seed if cfg else (args.seed or 0)
        if args.command == "simulate":
            for path in cmd_simulate(cfg, out_dir, seed):
                print(path)
        elif args.command == "fit":
            cmd_fit(cfg, out_dir, seed)
        elif args.command == "invert":
            sys_ = build_system(cfg) if cfg else None
            if args.lattice_tolerance is not None and args.lattice_tolerance < 0:
                raise UserError("--lattice-tolerance must be non-negative")
            cmd_invert(args.a_par_khz, args.a_perp_khz, args.phi_deg, out_dir,
                       sigma_a_par_khz=args.sigma_a_par_khz, sigma_a_perp_khz=args.sigma_a_perp_khz,
                       sigma_phi_deg=args.sigma_phi_deg, lattice_tolerance=args.lattice_tolerance,
                       ambiguous_180=args.ambiguous_180, sys_=sys_, label=args.label, cfg=cfg, seed=seed)
        elif args.command == "odmr-calibrate":
            print(cmd_odmr_calibrate(cfg, out_dir, seed))
        return EXIT_OK
    except (UserError,) + USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - report and signal an internal failure
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
