"""Manifold state, residual functions and analytic Jacobians for all factors.

State local coordinates (19): [rot(3), pos(3), vel(3), bias_gyro(3),
bias_accel(3), clock(4)]. Rotation perturbations are right-multiplied,
position/velocity/bias increments are additive, clock increments are in
METERS (c * seconds) so the normal equations stay well conditioned; the
stored clock field remains in seconds.

Anchor local coordinates (6): [rot(3), trans(3)].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constants import GRAVITY, SPEED_OF_LIGHT
from .errors import BelowElevationCutoff, EmptyWindow, NonMonotonicTime
from .gnss import (
    AtmosphereConfig,
    DdCarrierMeasurement,
    SatelliteObservation,
    line_of_sight,
)
from .so3 import (
    double_integral,
    exp_so3,
    hat,
    left_jacobian,
    log_so3,
    right_jacobian,
    right_jacobian_inv,
)

STATE_DOF = 19
ANCHOR_DOF = 6
SL_ROT = slice(0, 3)
SL_POS = slice(3, 6)
SL_VEL = slice(6, 9)
SL_BG = slice(9, 12)
SL_BA = slice(12, 15)
SL_CLK = slice(15, 19)


@dataclass
class NavState:
    """Robot state: orientation/position of the base in W, body-frame
    velocity, IMU biases and per-constellation receiver clock offsets [s]."""

    rot: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    bias_gyro: np.ndarray
    bias_accel: np.ndarray
    clock: np.ndarray

    @staticmethod
    def identity() -> "NavState":
        return NavState(np.eye(3), np.zeros(3), np.zeros(3),
                        np.zeros(3), np.zeros(3), np.zeros(4))

    def copy(self) -> "NavState":
        return NavState(self.rot.copy(), self.pos.copy(), self.vel.copy(),
                        self.bias_gyro.copy(), self.bias_accel.copy(), self.clock.copy())

    def velocity_world(self) -> np.ndarray:
        return self.rot @ self.vel

    def retract(self, delta: np.ndarray) -> "NavState":
        return NavState(
            rot=self.rot @ exp_so3(delta[SL_ROT]),
            pos=self.pos + delta[SL_POS],
            vel=self.vel + delta[SL_VEL],
            bias_gyro=self.bias_gyro + delta[SL_BG],
            bias_accel=self.bias_accel + delta[SL_BA],
            clock=self.clock + delta[SL_CLK] / SPEED_OF_LIGHT,
        )

    def local(self, other: "NavState") -> np.ndarray:
        delta = np.empty(STATE_DOF)
        delta[SL_ROT] = log_so3(self.rot.T @ other.rot)
        delta[SL_POS] = other.pos - self.pos
        delta[SL_VEL] = other.vel - self.vel
        delta[SL_BG] = other.bias_gyro - self.bias_gyro
        delta[SL_BA] = other.bias_accel - self.bias_accel
        delta[SL_CLK] = (other.clock - self.clock) * SPEED_OF_LIGHT
        return delta


@dataclass
class WorldAnchor:
    """Rigid transform T_EW mapping W-frame points into the ECEF frame E."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "WorldAnchor":
        return WorldAnchor(np.eye(3), np.zeros(3))

    def copy(self) -> "WorldAnchor":
        return WorldAnchor(self.rotation.copy(), self.translation.copy())

    def transform(self, p_w: np.ndarray) -> np.ndarray:
        return self.rotation @ p_w + self.translation

    def transform_many(self, p_w: np.ndarray) -> np.ndarray:
        return p_w @ self.rotation.T + self.translation

    def retract(self, delta: np.ndarray) -> "WorldAnchor":
        return WorldAnchor(self.rotation @ exp_so3(delta[0:3]),
                           self.translation + delta[3:6])

    def local(self, other: "WorldAnchor") -> np.ndarray:
        return np.concatenate([log_so3(self.rotation.T @ other.rotation),
                               other.translation - self.translation])


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities; floors keep covariances invertible."""

    accel_noise: float = 1e-2      # m/s^2/sqrt(Hz)
    gyro_noise: float = 1e-3      # rad/s/sqrt(Hz)
    accel_bias_rw: float = 1e-4   # m/s^3/sqrt(Hz)
    gyro_bias_rw: float = 1e-5    # rad/s^2/sqrt(Hz)


@dataclass
class PreintegratedImu:
    """Relative-motion constraint compounded from IMU samples over [t_i, t_j].

    Deltas follow the usual convention: gravity excluded, expressed in the
    body frame at t_i. First-order bias Jacobians are stored for cheap
    re-linearization; ``cov`` orders blocks as [rot, vel, pos, bg, ba].
    """

    dt: float
    delta_rot: np.ndarray
    delta_vel: np.ndarray
    delta_pos: np.ndarray
    bias_gyro_lin: np.ndarray
    bias_accel_lin: np.ndarray
    d_rot_d_bg: np.ndarray
    d_vel_d_bg: np.ndarray
    d_vel_d_ba: np.ndarray
    d_pos_d_bg: np.ndarray
    d_pos_d_ba: np.ndarray
    cov: np.ndarray

    def corrected_deltas(self, bias_gyro: np.ndarray, bias_accel: np.ndarray):
        dbg = bias_gyro - self.bias_gyro_lin
        dba = bias_accel - self.bias_accel_lin
        rot = self.delta_rot @ exp_so3(self.d_rot_d_bg @ dbg)
        vel = self.delta_vel + self.d_vel_d_bg @ dbg + self.d_vel_d_ba @ dba
        pos = self.delta_pos + self.d_pos_d_bg @ dbg + self.d_pos_d_ba @ dba
        return rot, vel, pos


def imu_preintegrate(
    samples: list[ImuSample],
    t_start: float,
    t_end: float,
    bias_gyro: np.ndarray,
    bias_accel: np.ndarray,
    noise: ImuNoise = ImuNoise(),
) -> PreintegratedImu:
    """Compound samples over [t_start, t_end] with zero-order hold.

    Sample k is held constant over [t_k, t_{k+1}), the last one until t_end.
    Rotation/velocity/position increments use the exact constant-rate
    solution (left Jacobian and its double integral), so dead reckoning a
    noiseless analytic stream is exact up to floating point.
    """
    if len(samples) < 2:
        raise EmptyWindow(f"need >= 2 IMU samples, got {len(samples)}")
    times = [s.t for s in samples]
    if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
        raise NonMonotonicTime("IMU sample timestamps must strictly increase")
    if t_end <= t_start:
        raise NonMonotonicTime("t_end must exceed t_start")

    drot = np.eye(3)
    dvel = np.zeros(3)
    dpos = np.zeros(3)
    j_r_bg = np.zeros((3, 3))
    j_v_bg = np.zeros((3, 3))
    j_v_ba = np.zeros((3, 3))
    j_p_bg = np.zeros((3, 3))
    j_p_ba = np.zeros((3, 3))
    cov9 = np.zeros((9, 9))
    sq_g = noise.gyro_noise**2
    sq_a = noise.accel_noise**2

    bounds = times[1:] + [t_end]
    for sample, t_next in zip(samples, bounds):
        dt = min(t_next, t_end) - max(sample.t, t_start)
        if dt <= 0.0:
            continue
        w = sample.gyro - bias_gyro
        a = sample.accel - bias_accel
        phi = w * dt
        inc = exp_so3(phi)
        jl_a = (left_jacobian(phi) @ a) * dt
        c_a = (double_integral(phi) @ a) * dt * dt

        # Covariance and bias Jacobians use pre-update quantities.
        a_vr = -drot @ hat(jl_a)
        a_pr = -drot @ hat(c_a)
        amat = np.eye(9)
        amat[0:3, 0:3] = inc.T
        amat[3:6, 0:3] = a_vr
        amat[6:9, 0:3] = a_pr
        amat[6:9, 3:6] = np.eye(3) * dt
        g_r = right_jacobian(phi) * dt
        g_v = drot @ left_jacobian(phi) * dt
        g_p = drot @ double_integral(phi) * dt * dt
        cov9 = amat @ cov9 @ amat.T
        cov9[0:3, 0:3] += g_r @ g_r.T * (sq_g / dt)
        cov9[3:6, 3:6] += g_v @ g_v.T * (sq_a / dt)
        cov9[6:9, 6:9] += g_p @ g_p.T * (sq_a / dt)
        cov9[3:6, 6:9] += g_v @ g_p.T * (sq_a / dt)
        cov9[6:9, 3:6] += g_p @ g_v.T * (sq_a / dt)

        j_p_bg += j_v_bg * dt + a_pr @ j_r_bg
        j_p_ba += j_v_ba * dt - drot @ double_integral(phi) * dt * dt
        j_v_bg += a_vr @ j_r_bg
        j_v_ba += -drot @ left_jacobian(phi) * dt
        j_r_bg = inc.T @ j_r_bg - right_jacobian(phi) * dt

        dpos = dpos + dvel * dt + drot @ c_a
        dvel = dvel + drot @ jl_a
        drot = drot @ inc

    total = t_end - t_start
    cov = np.zeros((15, 15))
    cov[0:9, 0:9] = cov9
    cov[9:12, 9:12] = np.eye(3) * max(noise.gyro_bias_rw**2 * total, 1e-20)
    cov[12:15, 12:15] = np.eye(3) * max(noise.accel_bias_rw**2 * total, 1e-20)
    # Floor to keep the whitener well defined even for zero noise densities.
    cov[0:9, 0:9] += np.eye(9) * 1e-16
    return PreintegratedImu(
        dt=total, delta_rot=drot, delta_vel=dvel, delta_pos=dpos,
        bias_gyro_lin=np.asarray(bias_gyro, dtype=float).copy(),
        bias_accel_lin=np.asarray(bias_accel, dtype=float).copy(),
        d_rot_d_bg=j_r_bg, d_vel_d_bg=j_v_bg, d_vel_d_ba=j_v_ba,
        d_pos_d_bg=j_p_bg, d_pos_d_ba=j_p_ba, cov=cov,
    )


def predict_state(state: NavState, pim: PreintegratedImu, gravity: np.ndarray) -> NavState:
    """Dead-reckon a state through a preintegrated IMU interval."""
    drot, dvel, dpos = pim.corrected_deltas(state.bias_gyro, state.bias_accel)
    v_w = state.rot @ state.vel
    rot_j = state.rot @ drot
    p_j = state.pos + v_w * pim.dt + 0.5 * gravity * pim.dt**2 + state.rot @ dpos
    v_wj = v_w + gravity * pim.dt + state.rot @ dvel
    return NavState(rot=rot_j, pos=p_j, vel=rot_j.T @ v_wj,
                    bias_gyro=state.bias_gyro.copy(),
                    bias_accel=state.bias_accel.copy(),
                    clock=state.clock.copy())


def imu_residual(
    x_i: NavState,
    x_j: NavState,
    pim: PreintegratedImu,
    gravity: np.ndarray | None = None,
):
    """15-vector residual [rot, vel, pos, bg, ba] and Jacobians (15, 19).

    Zero when (x_i, x_j) are consistent with the preintegrated motion and
    the biases of x_i equal the linearization point.
    """
    g = np.array([0.0, 0.0, -GRAVITY]) if gravity is None else gravity
    dt = pim.dt
    dbg = x_i.bias_gyro - pim.bias_gyro_lin
    dba = x_i.bias_accel - pim.bias_accel_lin
    phi_corr = pim.d_rot_d_bg @ dbg
    drot, dvel, dpos = pim.corrected_deltas(x_i.bias_gyro, x_i.bias_accel)

    rel = x_i.rot.T @ x_j.rot
    err_rot = drot.T @ rel
    r_rot = log_so3(err_rot)
    jr_inv = right_jacobian_inv(r_rot)

    rj_vj = rel @ x_j.vel
    ri_g = x_i.rot.T @ g
    r_vel = rj_vj - x_i.vel - dt * ri_g - dvel

    dp_w = x_j.pos - x_i.pos - 0.5 * g * dt * dt
    ri_dp = x_i.rot.T @ dp_w
    r_pos = ri_dp - x_i.vel * dt - dpos

    r = np.concatenate([r_rot, r_vel, r_pos,
                        x_j.bias_gyro - x_i.bias_gyro,
                        x_j.bias_accel - x_i.bias_accel])

    j_i = np.zeros((15, STATE_DOF))
    j_j = np.zeros((15, STATE_DOF))
    # Rotation block
    j_i[0:3, SL_ROT] = -jr_inv @ rel.T
    j_j[0:3, SL_ROT] = jr_inv
    j_i[0:3, SL_BG] = -jr_inv @ err_rot.T @ right_jacobian(phi_corr) @ pim.d_rot_d_bg
    # Velocity block
    j_i[3:6, SL_ROT] = hat(rj_vj) - dt * hat(ri_g)
    j_j[3:6, SL_ROT] = -rel @ hat(x_j.vel)
    j_i[3:6, SL_VEL] = -np.eye(3)
    j_j[3:6, SL_VEL] = rel
    j_i[3:6, SL_BG] = -pim.d_vel_d_bg
    j_i[3:6, SL_BA] = -pim.d_vel_d_ba
    # Position block
    j_i[6:9, SL_ROT] = hat(ri_dp)
    j_i[6:9, SL_POS] = -x_i.rot.T
    j_j[6:9, SL_POS] = x_i.rot.T
    j_i[6:9, SL_VEL] = -dt * np.eye(3)
    j_i[6:9, SL_BG] = -pim.d_pos_d_bg
    j_i[6:9, SL_BA] = -pim.d_pos_d_ba
    # Bias random walk
    j_i[9:12, SL_BG] = -np.eye(3)
    j_j[9:12, SL_BG] = np.eye(3)
    j_i[12:15, SL_BA] = -np.eye(3)
    j_j[12:15, SL_BA] = np.eye(3)
    return r, j_i, j_j


@dataclass
class OdometryMeasurement:
    """Relative pose of epoch t_j expressed in the body frame at t_i."""

    t_i: float
    t_j: float
    rel_rot: np.ndarray
    rel_trans: np.ndarray
    cov: np.ndarray  # 6x6, ordered [rot, trans]


def odometry_residual(x_i: NavState, x_j: NavState, meas: OdometryMeasurement):
    """6-vector residual [rot, trans] of the relative-pose discrepancy."""
    rel = x_i.rot.T @ x_j.rot
    err_rot = meas.rel_rot.T @ rel
    r_rot = log_so3(err_rot)
    t_rel = x_i.rot.T @ (x_j.pos - x_i.pos)
    r_trans = meas.rel_rot.T @ (t_rel - meas.rel_trans)
    r = np.concatenate([r_rot, r_trans])

    jr_inv = right_jacobian_inv(r_rot)
    j_i = np.zeros((6, STATE_DOF))
    j_j = np.zeros((6, STATE_DOF))
    j_i[0:3, SL_ROT] = -jr_inv @ rel.T
    j_j[0:3, SL_ROT] = jr_inv
    j_i[3:6, SL_ROT] = meas.rel_rot.T @ hat(t_rel)
    j_i[3:6, SL_POS] = -meas.rel_rot.T @ x_i.rot.T
    j_j[3:6, SL_POS] = meas.rel_rot.T @ x_i.rot.T
    return r, j_i, j_j


def pseudorange_terms(
    rec_ecef: np.ndarray,
    sat_pos: np.ndarray,
    iono_zenith_eff: np.ndarray,
    atm: AtmosphereConfig,
    gradients: bool = False,
    clamp_sin_el: float | None = None,
):
    """Model terms shared by the factor, the point solver and the simulator.

    Returns (model, d_model_d_rec, sin_el) where model = range + tropo +
    iono slant delays for receiver rows ``rec_ecef`` against ``sat_pos``.
    ``iono_zenith_eff`` carries the band-scaled zenith iono delay per row.
    """
    g = line_of_sight(sat_pos, rec_ecef, gradients=gradients)
    sin_el = g["sin_el"]
    s = np.maximum(sin_el, clamp_sin_el) if clamp_sin_el is not None else sin_el
    zen = atm.tropo_zenith + np.broadcast_to(
        np.asarray(iono_zenith_eff, dtype=float), sin_el.shape)
    model = g["rng"] + zen / s
    d_model = None
    if gradients:
        d_model = g["d_rng"].copy()
        active = (s == sin_el) if clamp_sin_el is not None else np.ones(len(s), dtype=bool)
        d_model[active] += (-zen[active] / s[active] ** 2)[:, None] * g["d_sinel"][active]
    return model, d_model, sin_el


def pseudorange_residual(
    state: NavState,
    anchor: WorldAnchor,
    obs: SatelliteObservation,
    atm: AtmosphereConfig,
):
    """Scalar pseudorange residual and its Jacobians (19,) and (6,).

    r = |s - T_EW p| + tropo + iono + c*clk_g - (rho + c*(sat clock + rel)),
    with s the Earth-rotation-corrected satellite position.
    """
    p_e = anchor.transform(state.pos)
    iono = np.array([atm.iono_zenith_for(obs.band)])
    model, d_model, sin_el = pseudorange_terms(
        p_e, obs.sat_pos.reshape(1, 3), iono, atm, gradients=True)
    if sin_el[0] < math.sin(atm.elevation_cutoff):
        raise BelowElevationCutoff(f"satellite {obs.sat_id} below cutoff")
    gidx = int(obs.constellation)
    r = float(model[0]) + SPEED_OF_LIGHT * state.clock[gidx] - obs.corrected_pseudorange()

    d_pe = d_model[0]
    j_state = np.zeros(STATE_DOF)
    j_state[SL_POS] = d_pe @ anchor.rotation
    j_state[15 + gidx] = 1.0
    j_anchor = np.zeros(ANCHOR_DOF)
    j_anchor[0:3] = -d_pe @ anchor.rotation @ hat(state.pos)
    j_anchor[3:6] = d_pe
    return r, j_state, j_anchor


def dd_range(rec_ecef: np.ndarray, pivot_pos: np.ndarray, other_pos: np.ndarray,
             gradients: bool = False):
    """Single-difference range (other - pivot) at one receiver position."""
    g = line_of_sight(np.vstack([other_pos, pivot_pos]), rec_ecef, gradients=gradients)
    val = g["rng"][0] - g["rng"][1]
    grad = g["d_rng"][0] - g["d_rng"][1] if gradients else None
    return val, grad


def dd_carrier_residual(
    x_i: NavState,
    x_j: NavState,
    anchor: WorldAnchor,
    meas: DdCarrierMeasurement,
):
    """Scalar DD carrier residual and Jacobians w.r.t. both states and anchor.

    No clock, ambiguity or atmosphere terms appear: they cancel in the
    double difference.
    """
    p_i = anchor.transform(x_i.pos)
    p_j = anchor.transform(x_j.pos)
    sd_j, grad_j = dd_range(p_j, meas.pivot_pos_j, meas.other_pos_j, gradients=True)
    sd_i, grad_i = dd_range(p_i, meas.pivot_pos_i, meas.other_pos_i, gradients=True)
    r = (sd_j - sd_i) - meas.value

    j_i = np.zeros(STATE_DOF)
    j_j = np.zeros(STATE_DOF)
    j_i[SL_POS] = -grad_i @ anchor.rotation
    j_j[SL_POS] = grad_j @ anchor.rotation
    j_anchor = np.zeros(ANCHOR_DOF)
    j_anchor[0:3] = grad_i @ anchor.rotation @ hat(x_i.pos) - grad_j @ anchor.rotation @ hat(x_j.pos)
    j_anchor[3:6] = grad_j - grad_i
    return r, j_i, j_j, j_anchor


@dataclass(frozen=True)
class RobustLoss:
    kind: str = "none"        # "none" | "huber"
    k: float = 1.345

    def __post_init__(self):
        if self.kind not in ("none", "huber"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.k <= 0.0:
            raise ValueError("huber threshold must be positive")


def apply_robust(residual: np.ndarray, loss: RobustLoss) -> float:
    """IRLS weight for a whitened residual: 1 inside the threshold,
    k/|r| beyond it."""
    if loss.kind == "none":
        return 1.0
    norm = float(np.linalg.norm(residual))
    if norm <= loss.k:
        return 1.0
    return loss.k / norm


def robust_cost(sq_norm: float, loss: RobustLoss) -> float:
    """Huber cost on |r|^2: quadratic inside k, linear outside; C1 at k."""
    if loss.kind == "none":
        return sq_norm
    norm = math.sqrt(sq_norm)
    if norm <= loss.k:
        return sq_norm
    return 2.0 * loss.k * norm - loss.k * loss.k


@dataclass
class PointSolution:
    pos: np.ndarray
    clock: np.ndarray            # seconds, all constellations (0 when absent)
    constellations: list[int]
    converged: bool
    iterations: int
    residual_rms: float


def solve_point_position(
    observations: list[SatelliteObservation],
    atm: AtmosphereConfig,
    initial_pos: np.ndarray | None = None,
    max_iter: int = 50,
    tol: float = 1e-11,
) -> PointSolution:
    """Single-epoch Gauss-Newton position/clock solve from pseudoranges.

    Unknowns are the receiver ECEF position and one clock offset per
    constellation present. Atmosphere terms are clamped at the elevation
    cutoff while the iterate is far from the Earth surface.
    """
    obs = sorted(observations, key=lambda o: (int(o.constellation), o.sat_id, o.band.label))
    consts = sorted({int(o.constellation) for o in obs})
    cidx = {g: 3 + k for k, g in enumerate(consts)}
    n_unk = 3 + len(consts)
    if len(obs) < n_unk:
        return PointSolution(np.zeros(3), np.zeros(4), consts, False, 0, float("inf"))

    sat_pos = np.vstack([o.sat_pos for o in obs])
    corr_pr = np.array([o.corrected_pseudorange() for o in obs])
    iono = np.array([atm.iono_zenith_for(o.band) for o in obs])
    gcol = np.array([cidx[int(o.constellation)] for o in obs])

    x = np.zeros(n_unk)
    x[0:3] = np.array([6378137.0, 0.0, 0.0]) if initial_pos is None else np.asarray(initial_pos, dtype=float)
    clamp = math.sin(atm.elevation_cutoff)
    prev_cost = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        model, d_model, _ = pseudorange_terms(
            x[0:3], sat_pos, iono, atm, gradients=True, clamp_sin_el=clamp)
        r = model + x[gcol] - corr_pr
        jac = np.zeros((len(obs), n_unk))
        jac[:, 0:3] = d_model
        jac[np.arange(len(obs)), gcol] = 1.0
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        cost = float(r @ r)
        if prev_cost is not None and cost > prev_cost * (1.0 + 1e-12):
            # plain GN overshoot: damp by halving
            for _ in range(20):
                step *= 0.5
                r2 = pseudorange_terms(x[0:3] + step[0:3], sat_pos, iono, atm,
                                       clamp_sin_el=clamp)[0] + (x + step)[gcol] - corr_pr
                if float(r2 @ r2) <= cost:
                    break
        x = x + step
        prev_cost = cost
        if np.max(np.abs(step)) < tol:
            converged = True
            break

    clock = np.zeros(4)
    for g in consts:
        clock[g] = x[cidx[g]] / SPEED_OF_LIGHT
    model, _, _ = pseudorange_terms(x[0:3], sat_pos, iono, atm, clamp_sin_el=clamp)
    r = model + x[gcol] - corr_pr
    return PointSolution(x[0:3].copy(), clock, consts, converged, it,
                         float(np.sqrt(np.mean(r * r))))
