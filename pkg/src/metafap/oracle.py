"""Equivalent-circuit ground truth for the two-layer transmit/reflect unit cell.

The unit cell is modelled as two lumped shunt branches (PIN diode on top,
varactor on the bottom) separated by a lossy dielectric slab.  Every function
here broadcasts over numpy arrays so whole datasets can be labelled at once;
ABCD matrices carry their 2x2 structure in the last two axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from .errors import DomainError, SingularNetworkError, ValidationError

ETA0 = 376.730313668  # free-space impedance, ohms
C0 = 299_792_458.0  # speed of light, m/s

FREQ_BANDS_GHZ: tuple[tuple[float, float], ...] = ((5.0, 11.0), (15.0, 25.0))
THETA_RANGE_DEG = (0.0, 89.0)
SPACING_RANGE = (0.25, 0.5)
CVT_RANGE_FF = (50.0, 353.0)
CVB_RANGE_PF = (0.64, 8.86)
RV_RANGE_OHM = (0.8, 50.0)
LV_RANGE_PH = (750.0, 850.0)
ARRAY_SIZES = (2, 3, 4, 5, 6)

FEATURE_NAMES = (
    "freq_ghz",
    "theta_deg",
    "spacing_lambda",
    "cvt_ff",
    "cvb_pf",
    "rv_ohm",
    "lv_ph",
    "array_n",
)
TARGET_NAMES = ("transmittance", "reflectance", "absorbance")


class Polarization(str, Enum):
    TE = "TE"
    TM = "TM"


def in_freq_domain(freq_ghz) -> np.ndarray:
    f = np.asarray(freq_ghz, dtype=float)
    ok = np.zeros(f.shape, dtype=bool)
    for lo, hi in FREQ_BANDS_GHZ:
        ok |= (f >= lo) & (f <= hi)
    return ok


def _check_range(name: str, value: float, lo: float, hi: float) -> None:
    if not (lo <= value <= hi):
        raise DomainError(f"{name}={value!r} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class DesignVector:
    freq_ghz: float
    theta_deg: float
    spacing_lambda: float
    cvt_ff: float
    cvb_pf: float
    rv_ohm: float
    lv_ph: float
    array_n: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise DomainError(f"{f.name} must be finite, got {v!r}")
        if not bool(in_freq_domain(self.freq_ghz)):
            raise DomainError(f"freq_ghz={self.freq_ghz!r} outside [5, 11] U [15, 25]")
        _check_range("theta_deg", self.theta_deg, *THETA_RANGE_DEG)
        _check_range("spacing_lambda", self.spacing_lambda, *SPACING_RANGE)
        _check_range("cvt_ff", self.cvt_ff, *CVT_RANGE_FF)
        _check_range("cvb_pf", self.cvb_pf, *CVB_RANGE_PF)
        _check_range("rv_ohm", self.rv_ohm, *RV_RANGE_OHM)
        _check_range("lv_ph", self.lv_ph, *LV_RANGE_PH)
        if int(self.array_n) != self.array_n or int(self.array_n) not in ARRAY_SIZES:
            raise DomainError(f"array_n={self.array_n!r} not in {ARRAY_SIZES}")
        object.__setattr__(self, "array_n", int(self.array_n))

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "DesignVector":
        values = [float(v) for v in values]
        if len(values) != len(FEATURE_NAMES):
            raise ValueError(f"expected {len(FEATURE_NAMES)} features, got {len(values)}")
        kw = dict(zip(FEATURE_NAMES, values))
        n = kw["array_n"]
        if n != int(n):
            raise DomainError(f"array_n={n!r} is not an integer")
        kw["array_n"] = int(n)
        return cls(**kw)


@dataclass(frozen=True)
class ResponseTriple:
    transmittance: float
    reflectance: float
    absorbance: float

    def __post_init__(self):
        for name in TARGET_NAMES:
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise DomainError(f"{name}={v!r} outside [0, 1]")
        total = self.transmittance + self.reflectance + self.absorbance
        if abs(total - 1.0) > 1e-6:
            raise DomainError(f"T+R+A={total!r} does not sum to 1")

    def to_array(self) -> np.ndarray:
        return np.array([self.transmittance, self.reflectance, self.absorbance])


@dataclass(frozen=True)
class OracleConfig:
    wavelength_mm: float = 45.0
    substrate_er: float = 4.3
    substrate_tand: float = 0.025
    substrate_thickness_mm: float = 2.0
    bottom_l_ph: float = 800.0
    bottom_r_ohm: float = 0.5
    coupling_kappa_spacing: float = 0.08
    coupling_kappa_array: float = 0.05
    # share of the cell aperture each lumped branch loads (sheet-admittance scaling)
    fill_factor: float = 0.3
    polarization: Polarization = Polarization.TE
    # zero every resistive term and the loss tangent (test override)
    lossless: bool = False

    def __post_init__(self):
        object.__setattr__(self, "polarization", Polarization(self.polarization))
        if self.substrate_er < 1:
            raise DomainError("substrate_er must be >= 1")
        if self.substrate_tand < 0:
            raise DomainError("substrate_tand must be >= 0")
        if self.substrate_thickness_mm <= 0:
            raise DomainError("substrate_thickness_mm must be > 0")
        if self.bottom_r_ohm < 0 or self.bottom_l_ph < 0:
            raise DomainError("bottom branch R and L must be >= 0")
        if not 0 < self.fill_factor <= 1:
            raise DomainError("fill_factor must lie in (0, 1]")
        if self.wavelength_mm <= 0:
            raise DomainError("wavelength_mm must be > 0")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["polarization"] = self.polarization.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OracleConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown OracleConfig fields: {sorted(unknown)}")
        return cls(**d)


def series_rlc_impedance(r, l, c, f):
    """Impedance of a series R-L-C branch, ``R + j(wL - 1/(wC))``."""
    r, l, c, f = (np.asarray(v, dtype=float) for v in (r, l, c, f))
    if np.any(f <= 0) or np.any(c <= 0):
        raise DomainError("series_rlc_impedance needs f > 0 and c > 0")
    if np.any(l < 0) or np.any(r < 0):
        raise DomainError("series_rlc_impedance needs l >= 0 and r >= 0")
    w = 2 * np.pi * f
    z = r + 1j * (w * l - 1.0 / (w * c))
    return z[()] if z.ndim == 0 else z


def wave_impedance(theta_deg, pol=Polarization.TE):
    theta = np.asarray(theta_deg, dtype=float)
    if np.any(~np.isfinite(theta)) or np.any(theta < 0) or np.any(theta > THETA_RANGE_DEG[1]):
        raise DomainError(f"theta_deg must lie in [0, {THETA_RANGE_DEG[1]}]")
    cos_t = np.cos(np.deg2rad(theta))
    z = ETA0 / cos_t if Polarization(pol) is Polarization.TE else ETA0 * cos_t
    return z[()] if z.ndim == 0 else z


def abcd_shunt(y) -> np.ndarray:
    y = np.asarray(y, dtype=complex)
    if not np.all(np.isfinite(y)):
        raise DomainError("shunt admittance must be finite")
    m = np.zeros(y.shape + (2, 2), dtype=complex)
    m[..., 0, 0] = 1.0
    m[..., 1, 1] = 1.0
    m[..., 1, 0] = y
    return m


def abcd_line(thickness_mm, er, tand, f, theta_deg, pol=Polarization.TE) -> np.ndarray:
    """ABCD matrix of a lossy dielectric slab seen at oblique incidence.

    The refraction angle follows Snell's law against the complex permittivity;
    the slab impedance is the dielectric wave impedance projected for `pol`.
    """
    thickness = np.asarray(thickness_mm, dtype=float) * 1e-3
    f = np.asarray(f, dtype=float)
    if np.any(thickness < 0):
        raise DomainError("thickness must be >= 0")
    if np.any(np.asarray(er) < 1) or np.any(np.asarray(tand) < 0):
        raise DomainError("need er >= 1 and tand >= 0")
    if np.any(f <= 0):
        raise DomainError("frequency must be > 0")
    eps_c = np.asarray(er, dtype=float) * (1 - 1j * np.asarray(tand, dtype=float))
    sin_t = np.sin(np.deg2rad(np.asarray(theta_deg, dtype=float)))
    cos_tt = np.sqrt(1 - sin_t**2 / eps_c)
    k0 = 2 * np.pi * f / C0
    gamma = 1j * k0 * np.sqrt(eps_c) * cos_tt
    eta_d = ETA0 / np.sqrt(eps_c)
    zc = eta_d / cos_tt if Polarization(pol) is Polarization.TE else eta_d * cos_tt
    gl = gamma * thickness
    ch, sh = np.cosh(gl), np.sinh(gl)
    m = np.empty(np.broadcast(ch, zc).shape + (2, 2), dtype=complex)
    m[..., 0, 0] = ch
    m[..., 0, 1] = zc * sh
    m[..., 1, 0] = sh / zc
    m[..., 1, 1] = ch
    return m


def abcd_to_sparams(m, z0):
    """Return ``(S11, S21)`` of a reciprocal two-port referenced to `z0` at both ports."""
    m = np.asarray(m, dtype=complex)
    z0 = np.asarray(z0, dtype=float)
    if np.any(z0 <= 0):
        raise DomainError("reference impedance must be > 0")
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    delta = a + b / z0 + c * z0 + d
    if np.any(delta == 0):
        raise SingularNetworkError("A + B/Z0 + C*Z0 + D = 0")
    s11 = (a + b / z0 - c * z0 - d) / delta
    s21 = 2.0 / delta
    if s11.ndim == 0:
        return complex(s11), complex(s21)
    return s11, s21


def effective_top_capacitance_ff(cvt_ff, spacing_lambda, array_n, cfg: OracleConfig):
    """Mutual-coupling surrogate: spacing and array size perturb the top capacitance."""
    return (
        np.asarray(cvt_ff, dtype=float)
        * (1 + cfg.coupling_kappa_spacing * (0.5 - np.asarray(spacing_lambda, dtype=float)))
        * (1 + cfg.coupling_kappa_array / np.asarray(array_n, dtype=float))
    )


def cascade_matrix(x: np.ndarray, cfg: OracleConfig) -> np.ndarray:
    """Composed ABCD matrix for raw feature rows ``x`` of shape (..., 8)."""
    x = np.asarray(x, dtype=float)
    f_hz = x[..., 0] * 1e9
    theta = x[..., 1]
    c_eff = effective_top_capacitance_ff(x[..., 3], x[..., 2], x[..., 7], cfg) * 1e-15
    cvb = x[..., 4] * 1e-12
    rv = x[..., 5]
    lv = x[..., 6] * 1e-12
    bottom_r = cfg.bottom_r_ohm
    tand = cfg.substrate_tand
    if cfg.lossless:
        rv = np.zeros_like(rv)
        bottom_r = 0.0
        tand = 0.0
    y_top = cfg.fill_factor / series_rlc_impedance(rv, lv, c_eff, f_hz)
    y_bot = cfg.fill_factor / series_rlc_impedance(bottom_r, cfg.bottom_l_ph * 1e-12, cvb, f_hz)
    line = abcd_line(cfg.substrate_thickness_mm, cfg.substrate_er, tand, f_hz, theta, cfg.polarization)
    return abcd_shunt(y_top) @ line @ abcd_shunt(y_bot)


def power_fractions(x: np.ndarray, cfg: OracleConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unclamped ``(T, R, A)`` arrays for raw feature rows."""
    x = np.asarray(x, dtype=float)
    m = cascade_matrix(x, cfg)
    s11, s21 = abcd_to_sparams(m, wave_impedance(x[..., 1], cfg.polarization))
    r = np.abs(s11) ** 2
    t = np.abs(s21) ** 2
    return t, r, 1.0 - r - t


def response_array(x: np.ndarray, cfg: OracleConfig | None = None) -> np.ndarray:
    """Label raw feature rows of shape (n, 8); returns (n, 3) columns T, R, A.

    The features are assumed already validated (see `validate_features`).
    """
    cfg = cfg or OracleConfig()
    t, r, _ = power_fractions(x, cfg)
    s = t + r
    excess = s - 1.0
    if np.any(excess > 1e-9):
        raise ArithmeticError(f"R+T exceeds 1 by {excess.max()!r}; network not passive")
    # fl(s) + fl(1 - s) == 1 exactly for s in [0, 1]; the clamped case folds
    # the (< 1e-9) excess into R so closure stays exact.
    clamped = s > 1.0
    r = np.where(clamped, 1.0 - t, r)
    a = np.where(clamped, 0.0, 1.0 - s)
    return np.stack([t, r, a], axis=-1)


def unit_cell_response(d: DesignVector, cfg: OracleConfig | None = None) -> ResponseTriple:
    t, r, a = response_array(d.to_array()[None, :], cfg)[0]
    return ResponseTriple(float(t), float(r), float(a))


def invalid_rows(x: np.ndarray) -> np.ndarray:
    """Boolean mask of feature rows violating the DesignVector domain."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != len(FEATURE_NAMES):
        raise ValueError(f"features must have shape (n, {len(FEATURE_NAMES)})")
    bad = ~np.all(np.isfinite(x), axis=1)
    bad |= ~in_freq_domain(x[:, 0])
    ranges = [THETA_RANGE_DEG, SPACING_RANGE, CVT_RANGE_FF, CVB_RANGE_PF, RV_RANGE_OHM, LV_RANGE_PH]
    for j, (lo, hi) in enumerate(ranges, start=1):
        bad |= ~((x[:, j] >= lo) & (x[:, j] <= hi))
    bad |= ~np.isin(x[:, 7], ARRAY_SIZES)
    return bad


def validate_features(x: np.ndarray) -> None:
    """Vectorised DesignVector domain check for raw feature rows; raises DomainError."""
    bad = invalid_rows(x)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        try:
            DesignVector.from_array(np.asarray(x)[i])
        except DomainError as exc:
            raise DomainError(f"row {i}: {exc}") from None
        raise DomainError(f"row {i} outside the design domain")
