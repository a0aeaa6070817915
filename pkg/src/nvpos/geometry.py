"""Point-dipole inversion of hyperfine couplings and diamond lattice matching."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .constants import DIAMOND_LATTICE_CONSTANT, HBAR, MU0
from .hamiltonian import SystemParams

ANGSTROM = 1e-10
MAGIC_ANGLE = math.acos(1 / math.sqrt(3))

# lab axes in crystal coordinates: x = [1 1 -2], y = [-1 1 0], z = [1 1 1]
LAB_AXES = np.array([
    np.array([1.0, 1.0, -2.0]) / math.sqrt(6),
    np.array([-1.0, 1.0, 0.0]) / math.sqrt(2),
    np.array([1.0, 1.0, 1.0]) / math.sqrt(3),
])


class InversionError(ValueError):
    pass


def dipolar_constant(r: float, sys: SystemParams) -> float:
    """b = mu0 gamma_e gamma_n hbar / (4 pi r^3) in rad/s."""
    return MU0 * sys.gamma_e * sys.gamma_n * HBAR / (4 * math.pi * r ** 3)


def dipole_forward(r: float, theta: float, sys: SystemParams) -> tuple:
    """(a_par, a_perp) in rad/s for a point dipole at distance r and polar angle theta."""
    if r <= 0:
        raise ValueError("r must be positive")
    b = dipolar_constant(r, sys)
    c, s = math.cos(theta), math.sin(theta)
    return b * (3 * c * c - 1), 3 * b * abs(s * c)


def dipole_invert(a_par: float, a_perp: float, sys: SystemParams) -> tuple:
    """(r, theta) with theta in [0, pi/2] reproducing the couplings."""
    if a_perp < 0:
        raise InversionError("a_perp must be non-negative (its sign is absorbed into phi)")
    if a_par == 0 and a_perp == 0:
        raise InversionError("couplings are both zero; no finite distance")
    k = MU0 * sys.gamma_e * sys.gamma_n * HBAR / (4 * math.pi)
    if a_perp == 0:
        theta = 0.0 if a_par > 0 else math.pi / 2
    elif abs(a_par) < 1e-6 * a_perp:
        theta = MAGIC_ANGLE  # 3cos^2 - 1 vanishes; r follows from a_perp alone
    else:
        def h(t):
            c, s = math.cos(t), math.sin(t)
            return (3 * c * c - 1) * a_perp - 3 * s * c * a_par

        lo, hi = 0.0, math.pi / 2
        if not h(lo) > 0 > h(hi):
            raise InversionError("no bracketing root for theta")
        theta = brentq(h, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    c, s = math.cos(theta), math.sin(theta)
    geom = math.hypot(3 * c * c - 1, 3 * s * c)
    b = math.hypot(a_par, a_perp) / geom
    return (k / b) ** (1 / 3), theta


@dataclass(frozen=True)
class PositionEstimate:
    r: float
    theta: float
    phi: float
    sigma_r: float = 0.0
    sigma_theta: float = 0.0
    sigma_phi: float = 0.0
    sigma_rho: float = 0.0
    sigma_z: float = 0.0

    @property
    def rho(self) -> float:
        return self.r * math.sin(self.theta)

    @property
    def z(self) -> float:
        return self.r * abs(math.cos(self.theta))

    def cartesian(self, phi: Optional[float] = None) -> np.ndarray:
        p = self.phi if phi is None else phi
        return np.array([self.rho * math.cos(p), self.rho * math.sin(p), self.z])

    @property
    def phi_candidates(self) -> tuple:
        return self.phi, (self.phi + math.pi) % (2 * math.pi)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(rho=self.rho, z=self.z)
        d["units"] = {"r": "m", "rho": "m", "z": "m", "theta": "rad", "phi": "rad"}
        return d


def assemble_position(a_par: float, a_perp: float, phi_fit: float, sys: SystemParams, sigma_a_par: float = 0.0,
                      sigma_a_perp: float = 0.0, sigma_phi: float = 0.0) -> PositionEstimate:
    """Combine the dipole inversion with the fitted azimuth.

    Coupling errors are treated as independent and propagated to first order
    with central finite differences.
    """
    r, theta = dipole_invert(a_par, a_perp, sys)

    def coords(ap, aq):
        rr, tt = dipole_invert(ap, aq, sys)
        return np.array([rr, tt, rr * math.sin(tt), rr * abs(math.cos(tt))])

    J = np.zeros((4, 2))
    for j, (val, sig) in enumerate(((a_par, sigma_a_par), (a_perp, sigma_a_perp))):
        if sig == 0:
            continue
        h = 1e-6 * max(abs(a_par), abs(a_perp))
        args_p = [a_par, a_perp]
        args_m = [a_par, a_perp]
        args_p[j] += h
        args_m[j] -= h
        if j == 1 and args_m[1] < 0:
            args_m[1] = a_perp
            J[:, j] = (coords(*args_p) - coords(*args_m)) / h
        else:
            J[:, j] = (coords(*args_p) - coords(*args_m)) / (2 * h)
    s = np.sqrt((J ** 2) @ np.array([sigma_a_par ** 2, sigma_a_perp ** 2]))
    return PositionEstimate(r, theta, phi_fit % (2 * math.pi), float(s[0]), float(s[1]), float(sigma_phi),
                            float(s[2]), float(s[3]))


# --- lattice ---------------------------------------------------------------

@dataclass(frozen=True)
class LatticeSite:
    index: int
    position: tuple  # m, lab frame


_FCC = np.array([[0, 0, 0], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
_BASIS = np.vstack([_FCC, _FCC + 0.25])
# vacancy at the origin site, nitrogen at (1/4, 1/4, 1/4); lattice centred on the bond midpoint
_VACANCY = np.zeros(3)
_NITROGEN = np.full(3, 0.25)
_CENTER = np.full(3, 0.125)


def lattice_sites(radius_max: float, a: float = DIAMOND_LATTICE_CONSTANT, include_defect: bool = False) -> list:
    """Carbon sites within ``radius_max`` of the NV centre, lab frame.

    Origin at the N-V midpoint (an inversion centre), [111] along z. Indices
    count outward by distance with a fixed coordinate tie order.
    """
    if radius_max <= 0:
        raise ValueError("radius_max must be positive")
    n = int(math.ceil(radius_max / a)) + 1
    cells = np.arange(-n, n + 1)
    grid = np.stack(np.meshgrid(cells, cells, cells, indexing="ij"), -1).reshape(-1, 1, 3)
    frac = (grid + _BASIS[None]).reshape(-1, 3)
    if not include_defect:
        keep = ~(np.all(np.isclose(frac, _VACANCY), axis=1) | np.all(np.isclose(frac, _NITROGEN), axis=1))
        frac = frac[keep]
    pos = (frac - _CENTER) * a @ LAB_AXES.T
    d = np.linalg.norm(pos, axis=1)
    sel = d <= radius_max * (1 + 1e-12)
    pos, d = pos[sel], d[sel]
    order = np.lexsort((np.round(pos[:, 0] / a, 9), np.round(pos[:, 1] / a, 9), np.round(pos[:, 2] / a, 9),
                        np.round(d / a, 9)))
    return [LatticeSite(i + 1, tuple(map(float, pos[k]))) for i, k in enumerate(order)]


@dataclass(frozen=True)
class SiteMatch:
    site: LatticeSite
    residual: float  # m
    phi_used: float
    tie: bool = False

    def to_dict(self) -> dict:
        return {"index": self.site.index, "position_m": list(self.site.position), "residual_m": self.residual,
                "phi_used_rad": self.phi_used, "tie": self.tie}


def match_site(pos: PositionEstimate, sites: Sequence[LatticeSite], tolerance: float,
               ambiguous_180: bool = False) -> Optional[SiteMatch]:
    """Nearest lattice site to the estimate, or None beyond ``tolerance``.

    With ``ambiguous_180`` both azimuth candidates are tried. Equidistant
    sites resolve to the lowest index and set ``tie``.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    if not sites:
        return None
    P = np.array([s.position for s in sites])
    idx = np.array([s.index for s in sites])
    phis = pos.phi_candidates if ambiguous_180 else (pos.phi,)
    best = None
    for phi in phis:
        d = np.linalg.norm(P - pos.cartesian(phi), axis=1)
        dmin = d.min()
        close = np.flatnonzero(np.abs(d - dmin) <= 1e-9 * max(dmin, ANGSTROM))
        k = close[np.argmin(idx[close])]
        cand = SiteMatch(sites[k], float(d[k]), phi, len(close) > 1)
        if best is None or cand.residual < best.residual - 1e-9 * ANGSTROM:
            best = cand
        elif abs(cand.residual - best.residual) <= 1e-9 * ANGSTROM and cand.site.index != best.site.index:
            best = SiteMatch(min(best.site, cand.site, key=lambda s: s.index), best.residual,
                             best.phi_used if best.site.index < cand.site.index else cand.phi_used, True)
    if best.residual > tolerance:
        return None
    return best


# --- export ----------------------------------------------------------------

def position_json(pos: PositionEstimate, match: Optional[SiteMatch] = None, extra: Optional[dict] = None) -> str:
    d = {"position": pos.to_dict(), "r_angstrom": pos.r / ANGSTROM, "rho_angstrom": pos.rho / ANGSTROM,
         "z_angstrom": pos.z / ANGSTROM, "theta_deg": math.degrees(pos.theta), "phi_deg": math.degrees(pos.phi),
         "phi_candidates_deg": [math.degrees(p) for p in pos.phi_candidates],
         "match": match.to_dict() if match else "none"}
    if extra:
        d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True)


POLAR_COLUMNS = ("label", "rho_A", "phi_deg", "z_A", "sigma_phi_deg")


def polar_plot_csv(positions: Sequence[tuple]) -> str:
    """Plot data in the polar (rho, phi) layout; ``positions`` holds (label, PositionEstimate)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(POLAR_COLUMNS)
    for label, p in positions:
        w.writerow([label, repr(p.rho / ANGSTROM), repr(math.degrees(p.phi)), repr(p.z / ANGSTROM),
                    repr(math.degrees(p.sigma_phi))])
    return buf.getvalue()
