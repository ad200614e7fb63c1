"""Deterministic GNSS/IMU/odometry scenario simulator with ground truth.

Ground-truth states are defined by dead reckoning the clean IMU stream with
the same zero-order-hold integrator the estimator uses, so a noiseless
scenario is exactly consistent with every factor model: all residuals vanish
at the truth up to floating point. Observables are generated by evaluating
the estimator's own forward models at the truth and adding configured errors.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .constants import EARTH_MU, EARTH_ROTATION_RATE, GRAVITY, SPEED_OF_LIGHT
from .errors import ConfigError
from .factors import (
    ImuSample,
    NavState,
    OdometryMeasurement,
    WorldAnchor,
    imu_preintegrate,
    predict_state,
)
from .geodesy import GeodeticPoint, geodetic_to_ecef, local_axes, receiver_geometry
from .gnss import AtmosphereConfig, ConstellationId, SatelliteObservation, SignalBand, line_of_sight
from .so3 import exp_so3, rot_z
from .trajectories import make_trajectory

SYSTEM_PREFIX = {0: "G", 1: "R", 2: "E", 3: "C"}
SYSTEM_BANDS = {
    0: SignalBand("L1", SPEED_OF_LIGHT / 1575.42e6),
    1: SignalBand("G1", SPEED_OF_LIGHT / 1602.0e6),
    2: SignalBand("E1", SPEED_OF_LIGHT / 1575.42e6),
    3: SignalBand("B1", SPEED_OF_LIGHT / 1561.098e6),
}


@dataclass
class ConstellationSpec:
    per_system: int = 8
    orbit_radius: float = 2.66e7
    inclination: float = 0.96     # rad, ~55 deg
    planes: int = 4


@dataclass
class MaskSector:
    """Occlusion sector: blocks satellites with az in [az_min, az_max] and
    elevation below el_max during [t_start, t_end]. Angles in radians."""

    az_min: float
    az_max: float
    el_max: float = np.pi / 2
    t_start: float = 0.0
    t_end: float = float("inf")


@dataclass
class VisibilitySpec:
    min_elevation: float = 0.087
    sectors: list[MaskSector] = field(default_factory=list)


@dataclass
class ImuErrorSpec:
    accel_noise: float = 0.0       # m/s^2/sqrt(Hz)
    gyro_noise: float = 0.0        # rad/s/sqrt(Hz)
    accel_bias_rw: float = 0.0
    gyro_bias_rw: float = 0.0
    initial_accel_bias: tuple = (0.0, 0.0, 0.0)
    initial_gyro_bias: tuple = (0.0, 0.0, 0.0)


@dataclass
class OdomErrorSpec:
    rot_sigma: float = 0.0         # rad per relative pose
    trans_sigma: float = 0.0       # m per relative pose


@dataclass
class ErrorConfig:
    """All simulated error sources; zero everything for exact consistency."""

    pseudorange_sigma: float = 0.0
    carrier_sigma: float = 0.0
    clock_initial: tuple = (0.0, 0.0, 0.0, 0.0)   # s per constellation
    clock_walk_sigma: float = 0.0                 # s/sqrt(s)
    sat_clock_range: float = 0.0                  # s, uniform draw per satellite
    relativity_range: float = 0.0                 # s, uniform draw per satellite
    tropo_zenith: float = 0.0
    iono_zenith: float = 0.0
    multipath_prob: float = 0.0
    multipath_range: tuple = (20.0, 50.0)
    cycle_slip_prob: float = 0.0
    windup_enabled: bool = False
    ambiguity_range: int = 0
    imu: ImuErrorSpec = field(default_factory=ImuErrorSpec)
    odom: OdomErrorSpec = field(default_factory=OdomErrorSpec)


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    duration: float = 30.0
    gnss_rate: float = 5.0
    imu_rate: float = 200.0
    odom_rate: float = 0.0                # 0 disables odometry
    origin_latitude_deg: float = 51.75
    origin_longitude_deg: float = -1.26
    origin_height: float = 100.0
    anchor_yaw_deg: float = 0.0
    constellation: ConstellationSpec = field(default_factory=ConstellationSpec)
    trajectory: dict = field(default_factory=lambda: {"kind": "static"})
    errors: ErrorConfig = field(default_factory=ErrorConfig)
    visibility: VisibilitySpec = field(default_factory=VisibilitySpec)

    def validate(self):
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if self.gnss_rate <= 0 or self.imu_rate <= 0:
            raise ConfigError("rates must be positive")
        ratio = self.imu_rate / self.gnss_rate
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 2:
            raise ConfigError("imu_rate must be an integer multiple (>= 2x) of gnss_rate")
        if self.odom_rate > 0:
            r = self.gnss_rate / self.odom_rate
            if abs(r - round(r)) > 1e-9:
                raise ConfigError("gnss_rate must be an integer multiple of odom_rate")
        if self.constellation.per_system < 1:
            raise ConfigError("need at least one satellite per system")
        if not (0 <= self.errors.multipath_prob <= 1 and 0 <= self.errors.cycle_slip_prob <= 1):
            raise ConfigError("probabilities must be in [0, 1]")

    def origin_geodetic(self) -> GeodeticPoint:
        return GeodeticPoint(math.radians(self.origin_latitude_deg),
                             math.radians(self.origin_longitude_deg),
                             self.origin_height)

    def atmosphere(self) -> AtmosphereConfig:
        return AtmosphereConfig(tropo_zenith=self.errors.tropo_zenith,
                                iono_zenith=self.errors.iono_zenith,
                                elevation_cutoff=self.visibility.min_elevation)

    def true_anchor(self) -> WorldAnchor:
        g = self.origin_geodetic()
        east, north, up = local_axes(np.array([g.latitude]), np.array([g.longitude]))
        r_enu = np.column_stack([east[0], north[0], up[0]])
        return WorldAnchor(r_enu @ rot_z(math.radians(self.anchor_yaw_deg)),
                           geodetic_to_ecef(g))

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "Scenario":
        data = dict(data)
        try:
            if "constellation" in data:
                data["constellation"] = ConstellationSpec(**data["constellation"])
            if "visibility" in data:
                vis = dict(data["visibility"])
                vis["sectors"] = [MaskSector(**s) for s in vis.get("sectors", [])]
                data["visibility"] = VisibilitySpec(**vis)
            if "errors" in data:
                err = dict(data["errors"])
                if "imu" in err:
                    err["imu"] = ImuErrorSpec(**err["imu"])
                if "odom" in err:
                    err["odom"] = OdomErrorSpec(**err["odom"])
                if "clock_initial" in err:
                    err["clock_initial"] = tuple(err["clock_initial"])
                if "multipath_range" in err:
                    err["multipath_range"] = tuple(err["multipath_range"])
                data["errors"] = ErrorConfig(**err)
            scenario = Scenario(**data)
        except TypeError as ex:
            raise ConfigError(f"bad scenario field: {ex}") from ex
        scenario.validate()
        return scenario

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Event:
    t: float
    kind: str       # lock | slip | unlock | outlier
    sat_id: str
    band: str
    value: float = 0.0


@dataclass
class GroundTruth:
    epochs: list
    states: list                  # NavState per epoch, local frame
    anchor: WorldAnchor
    gravity_local: np.ndarray
    events: list = field(default_factory=list)

    def state_at(self, t: float) -> NavState:
        idx = int(np.argmin(np.abs(np.asarray(self.epochs) - t)))
        return self.states[idx]


@dataclass
class SimulationResult:
    scenario: Scenario
    truth: GroundTruth
    imu: list                     # ImuSample stream (noisy if configured)
    gnss: list                    # (t, [SatelliteObservation]) per epoch with data
    odometry: list                # OdometryMeasurement
    atmosphere: AtmosphereConfig


def orbit_positions(spec: ConstellationSpec, sat_index: np.ndarray, t: np.ndarray):
    """ECEF positions/velocities of satellites at (per-satellite) times.

    Circular orbits: RAAN spreads satellites over planes per system, the
    in-plane anomaly advances at the Keplerian rate, and the whole inertial
    constellation is rotated into ECEF by the Earth angle.
    """
    sat_index = np.asarray(sat_index)
    t = np.broadcast_to(np.asarray(t, dtype=float), sat_index.shape)
    sys = sat_index // spec.per_system
    k = sat_index % spec.per_system
    plane = k % spec.planes
    slot = k // spec.planes
    per_plane = int(np.ceil(spec.per_system / spec.planes))
    raan = 2.0 * np.pi * plane / spec.planes + sys * (np.pi / 7.0)
    u0 = 2.0 * np.pi * slot / per_plane + sys * 0.9 + plane * (np.pi / per_plane / 2.0)
    n_rate = math.sqrt(EARTH_MU / spec.orbit_radius**3)
    u = u0 + n_rate * t

    cos_u, sin_u = np.cos(u), np.sin(u)
    ci, si = math.cos(spec.inclination), math.sin(spec.inclination)
    # in-plane -> inertial
    x_p = spec.orbit_radius * cos_u
    y_p = spec.orbit_radius * sin_u
    cr, sr = np.cos(raan), np.sin(raan)
    xi = cr * x_p - sr * ci * y_p
    yi = sr * x_p + cr * ci * y_p
    zi = si * y_p
    vx_p = -spec.orbit_radius * n_rate * sin_u
    vy_p = spec.orbit_radius * n_rate * cos_u
    vxi = cr * vx_p - sr * ci * vy_p
    vyi = sr * vx_p + cr * ci * vy_p
    vzi = si * vy_p
    # inertial -> ECEF (Earth angle theta = omega * t)
    th = EARTH_ROTATION_RATE * t
    c, s = np.cos(th), np.sin(th)
    x = c * xi + s * yi
    y = -s * xi + c * yi
    z = zi
    vx = c * vxi + s * vyi + EARTH_ROTATION_RATE * y
    vy = -s * vxi + c * vyi - EARTH_ROTATION_RATE * x
    vz = vzi
    pos = np.stack([x, y, z], axis=-1)
    vel = np.stack([vx, vy, vz], axis=-1)
    return pos, vel


def propagate_constellation(spec: ConstellationSpec, t: float):
    """All satellite ECEF positions and velocities at scenario time t."""
    n = 4 * spec.per_system
    return orbit_positions(spec, np.arange(n), np.full(n, float(t)))


def sat_name(index: int, spec: ConstellationSpec) -> str:
    sys = index // spec.per_system
    return f"{SYSTEM_PREFIX[sys]}{index % spec.per_system:02d}"


class Simulator:
    """Generates one scenario; deterministic given (scenario, seed)."""

    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.sc = scenario
        self.anchor = scenario.true_anchor()
        self.gravity_local = np.array([0.0, 0.0, -GRAVITY])
        self.traj = make_trajectory(scenario.trajectory)
        self.atm = scenario.atmosphere()
        ss = np.random.SeedSequence(scenario.seed)
        kids = ss.spawn(8)
        self.rng_clock = np.random.default_rng(kids[0])
        self.rng_pr = np.random.default_rng(kids[1])
        self.rng_cp = np.random.default_rng(kids[2])
        self.rng_outlier = np.random.default_rng(kids[3])
        self.rng_slip = np.random.default_rng(kids[4])
        self.rng_imu = np.random.default_rng(kids[5])
        self.rng_odom = np.random.default_rng(kids[6])
        self.rng_amb = np.random.default_rng(kids[7])
        n_sats = 4 * scenario.constellation.per_system
        err = scenario.errors
        self.sat_clock = self.rng_amb.uniform(-err.sat_clock_range, err.sat_clock_range, n_sats)
        self.sat_rel = self.rng_amb.uniform(-err.relativity_range, err.relativity_range, n_sats)
        self.windup_phase = self.rng_amb.uniform(0.0, 2.0 * np.pi, n_sats)

    # ------------------------------------------------------------------ IMU
    def clean_imu(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Body angular rate and specific force of the analytic trajectory."""
        rot = self.traj.attitude(t)
        accel_w = self.traj.acceleration(t)
        omega = self.traj.body_rate(t)
        force = rot.T @ (accel_w - self.gravity_local)
        return omega, force

    def generate_imu(self):
        """Clean and noisy IMU streams plus the true bias history."""
        sc = self.sc
        n = int(round(sc.duration * sc.imu_rate))
        dt = 1.0 / sc.imu_rate
        err = sc.errors.imu
        bg = np.array(err.initial_gyro_bias, dtype=float)
        ba = np.array(err.initial_accel_bias, dtype=float)
        sq = math.sqrt(sc.imu_rate)
        clean = []
        noisy = []
        bias_hist = []
        for k in range(n):
            t = k / sc.imu_rate
            w, f = self.clean_imu(t)
            clean.append(ImuSample(t, w, f))
            wn = w + bg + self.rng_imu.standard_normal(3) * (err.gyro_noise * sq)
            fn = f + ba + self.rng_imu.standard_normal(3) * (err.accel_noise * sq)
            noisy.append(ImuSample(t, wn, fn))
            bias_hist.append((bg.copy(), ba.copy()))
            bg = bg + self.rng_imu.standard_normal(3) * (err.gyro_bias_rw * math.sqrt(dt))
            ba = ba + self.rng_imu.standard_normal(3) * (err.accel_bias_rw * math.sqrt(dt))
        return clean, noisy, bias_hist

    # ------------------------------------------------------ truth dead-reckon
    def integrate_truth(self, clean_samples, bias_hist):
        """Truth states on the GNSS epoch grid by exact ZOH dead reckoning."""
        sc = self.sc
        per = int(round(sc.imu_rate / sc.gnss_rate))
        n_epochs = int(round(sc.duration * sc.gnss_rate)) + 1
        state = NavState(self.traj.attitude(0.0), self.traj.position(0.0),
                         self.traj.attitude(0.0).T @ self.traj.velocity(0.0),
                         np.zeros(3), np.zeros(3), np.zeros(4))
        epochs = [0.0]
        states = [state]
        zero = np.zeros(3)
        for e in range(1, n_epochs):
            t0 = (e - 1) / sc.gnss_rate
            t1 = e / sc.gnss_rate
            chunk = clean_samples[(e - 1) * per: e * per]
            pim = imu_preintegrate(chunk, t0, t1, zero, zero)
            state = predict_state(state, pim, self.gravity_local)
            epochs.append(t1)
            states.append(state)
        # attach true biases at epoch times
        for e, st in enumerate(states):
            k = min(e * per, len(bias_hist) - 1)
            st.bias_gyro = bias_hist[k][0]
            st.bias_accel = bias_hist[k][1]
        return epochs, states

    # ------------------------------------------------------------- GNSS
    def azimuth_elevation(self, rec_ecef: np.ndarray, sat_ecef: np.ndarray):
        geom = line_of_sight(sat_ecef, rec_ecef)
        rg = receiver_geometry(rec_ecef)
        east, north = rg["east"][0], rg["north"][0]
        az = np.arctan2(geom["u"] @ east, geom["u"] @ north) % (2.0 * np.pi)
        el = np.arcsin(np.clip(geom["sin_el"], -1.0, 1.0))
        return az, el

    def _masked(self, az: float, el: float, t: float) -> bool:
        for sec in self.sc.visibility.sectors:
            if sec.t_start <= t <= sec.t_end and sec.az_min <= az <= sec.az_max and el < sec.el_max:
                return True
        return False

    def generate(self) -> SimulationResult:
        sc = self.sc
        clean, noisy, bias_hist = self.generate_imu()
        epochs, states = self.integrate_truth(clean, bias_hist)

        events: list[Event] = []
        gnss: list[tuple[float, list[SatelliteObservation]]] = []
        n_sats = 4 * sc.constellation.per_system
        lock_start = np.full(n_sats, np.nan)
        ambiguity = np.zeros(n_sats, dtype=np.int64)
        clocks = np.array(sc.errors.clock_initial, dtype=float)
        dt_epoch = 1.0 / sc.gnss_rate
        sin_cut = math.sin(sc.visibility.min_elevation)

        for e, (t, st) in enumerate(zip(epochs, states)):
            if e > 0 and sc.errors.clock_walk_sigma > 0:
                clocks = clocks + self.rng_clock.standard_normal(4) * (
                    sc.errors.clock_walk_sigma * math.sqrt(dt_epoch))
            st.clock = clocks.copy()
            rec = self.anchor.transform(st.pos)
            sat_pos, _ = propagate_constellation(sc.constellation, t)
            az, el = self.azimuth_elevation(rec, sat_pos)
            obs_list: list[SatelliteObservation] = []
            for idx in range(n_sats):
                name = sat_name(idx, sc.constellation)
                sys = idx // sc.constellation.per_system
                band = SYSTEM_BANDS[sys]
                visible = el[idx] >= sc.visibility.min_elevation and not self._masked(az[idx], el[idx], t)
                if not visible:
                    if not np.isnan(lock_start[idx]):
                        events.append(Event(t, "unlock", name, band.label))
                        lock_start[idx] = np.nan
                    continue
                if np.isnan(lock_start[idx]):
                    lock_start[idx] = t
                    ambiguity[idx] = self._draw_ambiguity()
                    events.append(Event(t, "lock", name, band.label, float(ambiguity[idx])))
                elif sc.errors.cycle_slip_prob > 0 and self.rng_slip.random() < sc.errors.cycle_slip_prob:
                    lock_start[idx] = t
                    ambiguity[idx] = self._draw_ambiguity()
                    events.append(Event(t, "slip", name, band.label, float(ambiguity[idx])))

                # transmit-time position: one fixed-point iteration of tau
                tau0 = float(np.linalg.norm(sat_pos[idx] - rec)) / SPEED_OF_LIGHT
                s_tx, _ = orbit_positions(sc.constellation, np.array([idx]), np.array([t - tau0]))
                s_tx = s_tx[0]
                geom = line_of_sight(s_tx, rec)
                rng_m = float(geom["rng"][0])
                sin_el = float(geom["sin_el"][0])
                if sin_el < sin_cut:
                    continue
                tropo = sc.errors.tropo_zenith
                iono = self.atm.iono_zenith_for(band)
                clk = SPEED_OF_LIGHT * (clocks[sys] - self.sat_clock[idx] - self.sat_rel[idx])

                pr = rng_m + (tropo + iono) / sin_el + clk
                cp = rng_m + (tropo - iono) / sin_el + clk - band.wavelength * float(ambiguity[idx])
                if sc.errors.windup_enabled:
                    wind = 0.4 * math.sin(2.0 * np.pi * t / 240.0 + self.windup_phase[idx])
                    cp += band.wavelength * wind
                if sc.errors.pseudorange_sigma > 0:
                    pr += self.rng_pr.standard_normal() * sc.errors.pseudorange_sigma
                if sc.errors.carrier_sigma > 0:
                    cp += self.rng_cp.standard_normal() * sc.errors.carrier_sigma
                if sc.errors.multipath_prob > 0 and self.rng_outlier.random() < sc.errors.multipath_prob:
                    lo, hi = sc.errors.multipath_range
                    bias = self.rng_outlier.uniform(lo, hi)
                    pr += bias
                    events.append(Event(t, "outlier", name, band.label, bias))

                obs_list.append(SatelliteObservation(
                    sat_id=name,
                    constellation=ConstellationId(sys),
                    band=band,
                    epoch=t,
                    pseudorange=pr,
                    carrier_phase=cp,
                    sat_pos=s_tx,
                    sat_clock_bias=self.sat_clock[idx],
                    relativity_corr=self.sat_rel[idx],
                    lock_duration=t - lock_start[idx],
                    reported_std=sc.errors.pseudorange_sigma,
                ))
            if obs_list:
                gnss.append((t, obs_list))

        odometry = self._generate_odometry(epochs, states)
        truth = GroundTruth(epochs=epochs, states=states, anchor=self.anchor,
                            gravity_local=self.gravity_local, events=events)
        return SimulationResult(scenario=sc, truth=truth, imu=noisy, gnss=gnss,
                                odometry=odometry, atmosphere=self.atm)

    def _draw_ambiguity(self) -> int:
        r = self.sc.errors.ambiguity_range
        if r <= 0:
            return 0
        return int(self.rng_amb.integers(-r, r + 1))

    # ------------------------------------------------------------ odometry
    def _generate_odometry(self, epochs, states):
        sc = self.sc
        if sc.odom_rate <= 0:
            return []
        stride = int(round(sc.gnss_rate / sc.odom_rate))
        err = sc.errors.odom
        if err.rot_sigma > 0 or err.trans_sigma > 0:
            cov = np.diag([max(err.rot_sigma, 1e-9)**2] * 3 + [max(err.trans_sigma, 1e-7)**2] * 3)
        else:
            cov = np.diag([1e-6**2] * 3 + [1e-4**2] * 3)
        out = []
        for j in range(stride, len(epochs), stride):
            i = j - stride
            xi, xj = states[i], states[j]
            rel_rot = xi.rot.T @ xj.rot
            rel_trans = xi.rot.T @ (xj.pos - xi.pos)
            if err.rot_sigma > 0 or err.trans_sigma > 0:
                xi_noise = np.concatenate([
                    self.rng_odom.standard_normal(3) * err.rot_sigma,
                    self.rng_odom.standard_normal(3) * err.trans_sigma,
                ])
                # right-multiplied perturbation: (R, t) -> (R exp(rho), t + R delta)
                rel_trans = rel_trans + rel_rot @ xi_noise[3:6]
                rel_rot = rel_rot @ exp_so3(xi_noise[0:3])
            out.append(OdometryMeasurement(
                t_i=epochs[i], t_j=epochs[j],
                rel_rot=rel_rot, rel_trans=rel_trans, cov=cov))
        return out


def simulate(scenario: Scenario) -> SimulationResult:
    return Simulator(scenario).generate()
