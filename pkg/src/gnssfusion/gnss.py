"""GNSS observation data model, atmosphere delays, double-difference building.

The slant-delay model is deliberately simple: a configurable zenith delay
mapped with 1/sin(elevation). Simulator and estimator share this module so
they cannot diverge by convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .constants import SPEED_OF_LIGHT, WAVELENGTH_REF
from .errors import BelowElevationCutoff, NoPivotAvailable, NonMonotonicTime
from .geodesy import receiver_geometry, sagnac_correct_many

# Default double-difference noise: four carrier phases at ~5 mm each.
DD_SIGMA_DEFAULT = 2.0 * math.sqrt(2.0) * 0.005


class ConstellationId(IntEnum):
    GPS = 0
    GLONASS = 1
    GALILEO = 2
    BEIDOU = 3


NUM_CONSTELLATIONS = len(ConstellationId)


@dataclass(frozen=True)
class SignalBand:
    """Carrier band with its nominal wavelength [m]."""

    label: str
    wavelength: float

    def __post_init__(self):
        if not (0.18 <= self.wavelength <= 0.26):
            raise ValueError(f"wavelength {self.wavelength} m outside [0.18, 0.26]")


@dataclass
class SatelliteObservation:
    """One satellite/band measurement at a receiver epoch.

    ``sat_pos`` is the satellite ECEF position at transmit time (not yet
    corrected for Earth rotation). ``carrier_phase`` is in meters.
    """

    sat_id: str
    constellation: ConstellationId
    band: SignalBand
    epoch: float
    pseudorange: float
    carrier_phase: float
    sat_pos: np.ndarray
    sat_clock_bias: float = 0.0
    relativity_corr: float = 0.0
    lock_duration: float = 0.0
    reported_std: float | None = None

    def clock_term(self) -> float:
        """c * (satellite clock bias + relativity) [m]."""
        return SPEED_OF_LIGHT * (self.sat_clock_bias + self.relativity_corr)

    def corrected_pseudorange(self) -> float:
        return self.pseudorange + self.clock_term()

    def corrected_phase(self) -> float:
        return self.carrier_phase + self.clock_term()

    def is_plausible(self) -> bool:
        return (
            1.8e7 < self.pseudorange < 5e7
            and self.lock_duration >= 0.0
            and np.isfinite(self.epoch)
            and bool(np.all(np.isfinite(self.sat_pos)))
        )


@dataclass
class DdCarrierMeasurement:
    """Double-differenced carrier phase across two satellites and two epochs.

    Satellites share constellation and band; both kept lock over [t_i, t_j].
    Positions are transmit-time ECEF of (pivot, other) at each epoch.
    """

    pivot_id: str
    other_id: str
    constellation: ConstellationId
    band: SignalBand
    t_i: float
    t_j: float
    value: float
    noise_std: float
    pivot_pos_i: np.ndarray = field(repr=False, default=None)
    other_pos_i: np.ndarray = field(repr=False, default=None)
    pivot_pos_j: np.ndarray = field(repr=False, default=None)
    other_pos_j: np.ndarray = field(repr=False, default=None)


@dataclass
class AtmosphereConfig:
    """Zenith delays [m] and the elevation cutoff [rad] for the slant model."""

    tropo_zenith: float = 2.4
    iono_zenith: float = 5.0           # at the reference wavelength
    reference_wavelength: float = WAVELENGTH_REF
    elevation_cutoff: float = 0.087    # ~5 degrees

    def __post_init__(self):
        if self.tropo_zenith < 0.0 or self.iono_zenith < 0.0:
            raise ValueError("zenith delays must be non-negative")
        if not (0.0 <= self.elevation_cutoff < np.pi / 2):
            raise ValueError("elevation cutoff outside [0, pi/2)")

    def iono_zenith_for(self, band: SignalBand) -> float:
        ratio = band.wavelength / self.reference_wavelength
        return self.iono_zenith * ratio * ratio


def line_of_sight(sat_pos: np.ndarray, rec_pos: np.ndarray, gradients: bool = False) -> dict:
    """Receiver-to-satellite geometry shared by all observation models.

    The satellite position is corrected for Earth rotation during the signal
    flight, with the travel time taken as |sat - rec| / c. Rows of ``sat_pos``
    (n, 3) pair with rows of ``rec_pos`` (n, 3) or a single receiver (3,).

    Returns corrected positions ``s``, ranges ``rng``, unit vectors ``u``,
    the sine of the geodetic elevation ``sin_el`` and, when ``gradients``,
    the derivatives ``d_rng`` and ``d_sinel`` w.r.t. the receiver ECEF
    position (both shape (n, 3)).
    """
    sat_pos = np.atleast_2d(np.asarray(sat_pos, dtype=float))
    rec = np.asarray(rec_pos, dtype=float)
    if rec.ndim == 1:
        rec = np.broadcast_to(rec, sat_pos.shape)
    d0 = sat_pos - rec
    r0 = np.linalg.norm(d0, axis=1)
    tau = r0 / SPEED_OF_LIGHT
    s = sagnac_correct_many(sat_pos, tau)
    d = s - rec
    rng = np.linalg.norm(d, axis=1)
    u = d / rng[:, None]

    geom = receiver_geometry(rec)
    up = geom["up"]
    sin_el = np.sum(u * up, axis=1)

    out = {"s": s, "rng": rng, "u": u, "sin_el": sin_el}
    if gradients:
        from .constants import EARTH_ROTATION_RATE

        u0 = d0 / r0[:, None]
        zxs = np.stack([-s[:, 1], s[:, 0], np.zeros(len(s))], axis=-1)
        # Range: -u plus the travel-time chain through the Earth-rotation fix.
        sag = (EARTH_ROTATION_RATE / SPEED_OF_LIGHT) * np.sum(u * zxs, axis=1)
        d_rng = -u + sag[:, None] * u0
        # sin(elevation): line-of-sight swing plus the curvature of the
        # geodetic normal, d(up)/d(p) = nn^T/(M+h) + ee^T/(N+h), plus the
        # travel-time chain moving the corrected satellite position.
        north, east = geom["north"], geom["east"]
        n_u = np.sum(north * u, axis=1) * geom["inv_m_h"]
        e_u = np.sum(east * u, axis=1) * geom["inv_n_h"]
        sag_el = (EARTH_ROTATION_RATE / SPEED_OF_LIGHT) * (
            np.sum(up * zxs, axis=1) - sin_el * np.sum(u * zxs, axis=1)) / rng
        d_sinel = (-(up - sin_el[:, None] * u) / rng[:, None]
                   + north * n_u[:, None] + east * e_u[:, None]
                   + sag_el[:, None] * u0)
        out["d_rng"] = d_rng
        out["d_sinel"] = d_sinel
    return out


def slant_delay(zenith: float, sin_el: np.ndarray) -> np.ndarray:
    """Zenith delay mapped to slant with 1/sin(elevation)."""
    return zenith / sin_el


def elevation_angle(sat: np.ndarray, receiver: np.ndarray) -> float:
    """Elevation of the line of sight above the geodetic horizon [rad]."""
    g = line_of_sight(sat, receiver)
    return float(np.arcsin(np.clip(g["sin_el"][0], -1.0, 1.0)))


def tropo_delay(sat: np.ndarray, receiver: np.ndarray, cfg: AtmosphereConfig) -> float:
    """Tropospheric slant delay [m]; raises below the elevation cutoff."""
    g = line_of_sight(sat, receiver)
    sin_el = float(g["sin_el"][0])
    if sin_el < math.sin(cfg.elevation_cutoff):
        raise BelowElevationCutoff(f"elevation {math.degrees(math.asin(max(-1.0, min(1.0, sin_el)))):.2f} deg")
    return cfg.tropo_zenith / sin_el


def iono_delay(sat: np.ndarray, receiver: np.ndarray, band: SignalBand, cfg: AtmosphereConfig) -> float:
    """Ionospheric slant delay [m] for the band; raises below the cutoff.

    The returned value is positive; the carrier-phase model subtracts it
    (the ionosphere advances the phase while delaying the code).
    """
    g = line_of_sight(sat, receiver)
    sin_el = float(g["sin_el"][0])
    if sin_el < math.sin(cfg.elevation_cutoff):
        raise BelowElevationCutoff(f"elevation {math.degrees(math.asin(max(-1.0, min(1.0, sin_el)))):.2f} deg")
    return cfg.iono_zenith_for(band) / sin_el


def select_pivot(observations: list[SatelliteObservation], min_lock: float) -> str:
    """Pivot for a (constellation, band) group: the longest continuously
    tracked satellite, ties broken by smallest sat_id."""
    eligible = [o for o in observations if o.lock_duration >= min_lock]
    if not eligible:
        raise NoPivotAvailable(f"no satellite locked for {min_lock:.3f} s")
    top = max(o.lock_duration for o in eligible)
    return min(o.sat_id for o in eligible if o.lock_duration == top)


def build_dd_measurements(
    obs_i: list[SatelliteObservation],
    obs_j: list[SatelliteObservation],
    noise_std: float = DD_SIGMA_DEFAULT,
) -> list[DdCarrierMeasurement]:
    """Double differences between epochs t_i < t_j, one per non-pivot satellite.

    Per (constellation, band) group the pivot is the longest-locked satellite;
    every other satellite present and continuously locked at both epochs
    contributes one measurement. Satellites that slipped in between (lock
    shorter than the epoch gap) are excluded. The value is computed in fixed
    order, (phi_n_j - phi_m_j) - (phi_n_i - phi_m_i), on phases corrected for
    satellite clock bias and relativity; receiver-clock terms cancel exactly.
    """
    if not obs_i or not obs_j:
        return []
    t_i = obs_i[0].epoch
    t_j = obs_j[0].epoch
    if t_j <= t_i:
        raise NonMonotonicTime(f"expected t_i < t_j, got {t_i} >= {t_j}")
    span = t_j - t_i

    prev = {(o.sat_id, o.band.label): o for o in obs_i}
    groups: dict[tuple[int, str], list[SatelliteObservation]] = {}
    for o in obs_j:
        groups.setdefault((int(o.constellation), o.band.label), []).append(o)

    out: list[DdCarrierMeasurement] = []
    for key in sorted(groups):
        group = groups[key]
        eligible = [
            o for o in group
            if (o.sat_id, o.band.label) in prev and o.lock_duration >= span - 1e-9
        ]
        if len(eligible) < 2:
            continue
        try:
            pivot_id = select_pivot(eligible, span - 1e-9)
        except NoPivotAvailable:
            continue
        pivot_j = next(o for o in eligible if o.sat_id == pivot_id)
        pivot_i = prev[(pivot_id, pivot_j.band.label)]
        dp_j = pivot_j.corrected_phase()
        dp_i = pivot_i.corrected_phase()
        for o in sorted(eligible, key=lambda o: o.sat_id):
            if o.sat_id == pivot_id:
                continue
            o_i = prev[(o.sat_id, o.band.label)]
            value = (o.corrected_phase() - dp_j) - (o_i.corrected_phase() - dp_i)
            out.append(DdCarrierMeasurement(
                pivot_id=pivot_id,
                other_id=o.sat_id,
                constellation=o.constellation,
                band=o.band,
                t_i=t_i,
                t_j=t_j,
                value=value,
                noise_std=noise_std,
                pivot_pos_i=pivot_i.sat_pos,
                other_pos_i=o_i.sat_pos,
                pivot_pos_j=pivot_j.sat_pos,
                other_pos_j=o.sat_pos,
            ))
    return out
