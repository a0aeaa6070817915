"""Run configuration: YAML file validated against a strict schema."""

from __future__ import annotations

import math
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .constants import GAMMA_C13, GAMMA_E


class ConfigError(ValueError):
    """Schema or syntax problem in a config file; message carries line numbers."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SystemConfig(_Strict):
    B0_T: Union[float, tuple[float, float, float]] = Field(description="bias field magnitude along z, or a vector (T)")
    gamma_n: float = GAMMA_C13  # rad/s/T
    gamma_e: float = GAMMA_E  # rad/s/T
    polarization: float = Field(0.8, ge=0.0, le=1.0)

    @property
    def B0_vector(self) -> tuple:
        return (0.0, 0.0, float(self.B0_T)) if isinstance(self.B0_T, (int, float)) else tuple(self.B0_T)


class SpinConfig(_Strict):
    a_par_khz: float
    a_perp_khz: float = Field(ge=0.0)
    phi_deg: float = 0.0


class PulseConfig(_Strict):
    amplitude_T: float = Field(gt=0.0)
    duration_s: Optional[float] = Field(None, gt=0.0, description="omit to calibrate a pi/2 (coil) or pi (echo)")
    envelope: Literal["rectangular", "cosine-square"] = "rectangular"
    carrier_hz: Optional[float] = Field(None, ge=0.0, description="defaults to the bare nuclear Larmor frequency")
    phase_rad: float = 0.0
    dt_s: float = Field(2e-9, gt=0.0)


class CoilConfig(_Strict):
    polar_deg: float = Field(90.0, ge=0.0, le=180.0)
    azimuth_deg: float = 0.0
    field_per_current_T_per_A: float = Field(5e-3, gt=0.0)
    f3db_hz: Optional[float] = Field(None, gt=0.0, description="omit for an ideal coil")
    delay_s: float = 0.0
    angle_uncertainty_deg: float = Field(0.0, ge=0.0)
    pulse: PulseConfig


class ProtocolConfig(_Strict):
    kind: Literal["reference", "coil-precession", "echo"]
    t1_start_s: float = Field(0.0, ge=0.0)
    t1_stop_s: float = Field(80e-6, ge=0.0)
    t1_points: int = Field(161, ge=1)
    phi_rf_points: int = Field(24, ge=1)
    echo_t1_s: float = Field(15.68e-6, gt=0.0)
    readout_tau_s: Optional[float] = Field(None, gt=0.0)
    readout_n_pulses: Optional[int] = Field(None, gt=0)
    hf_pi2_tau_s: Optional[float] = Field(None, gt=0.0)
    hf_pi2_n_pulses: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def _pairs(self):
        for a, b in (("readout_tau_s", "readout_n_pulses"), ("hf_pi2_tau_s", "hf_pi2_n_pulses")):
            if (getattr(self, a) is None) != (getattr(self, b) is None):
                raise ValueError(f"{a} and {b} must be given together")
        if self.t1_stop_s < self.t1_start_s:
            raise ValueError("t1_stop_s must not be smaller than t1_start_s")
        return self


class NoiseConfig(_Strict):
    photons_per_shot: float = Field(0.03, gt=0.0)
    contrast: float = Field(0.3, gt=0.0, le=1.0)
    shots_per_point: int = Field(100_000, gt=0)


class OdmrConfig(_Strict):
    window_s: float = Field(400e-9, gt=0.0)
    probe_span_hz: float = Field(20e6, gt=0.0)
    probe_points: int = Field(201, ge=5)
    linewidth_hz: float = Field(2e6, gt=0.0)
    noise_sigma: float = Field(0.0, ge=0.0)


class FitConfig(_Strict):
    reference_trace: Optional[str] = None
    coil_trace: Optional[str] = None
    echo_trace: Optional[str] = None
    echo_method: Literal["cosine", "density-matrix"] = "cosine"
    B0_initial_T: Optional[float] = Field(None, gt=0.0)


class OutputConfig(_Strict):
    dir: str = "out"
    prefix: str = "run"


class RunConfig(_Strict):
    system: SystemConfig
    spin: SpinConfig
    coil: Optional[CoilConfig] = None
    protocol: ProtocolConfig
    noise: Optional[NoiseConfig] = None
    odmr: OdmrConfig = OdmrConfig()
    fit: FitConfig = FitConfig()
    output: OutputConfig = OutputConfig()
    rng_seed: int = 0
    readout_mode: Literal["full", "ideal"] = "full"

    @model_validator(mode="after")
    def _coil_required(self):
        if self.protocol.kind in ("coil-precession", "echo") and self.coil is None:
            raise ValueError(f"protocol {self.protocol.kind!r} needs a coil section")
        return self


def _node_line(root, loc) -> Optional[int]:
    """1-based line of the YAML node addressed by a pydantic error location."""
    node = root
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == key:
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            if nxt is None:
                return line
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "unknown line"
        raise ConfigError(f"{source}: {where}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: line 1: top level must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            ln = _node_line(root, loc)
            path = ".".join(str(p) for p in loc) or "<root>"
            lines.append(f"{source}: line {ln}: {path}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def config_dict(cfg: RunConfig) -> dict:
    d = cfg.model_dump(mode="json")
    return _finite(d)


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj
