"""Sliding-window MAP estimator: graph assembly, robust LM, marginalization.

The window holds NavStates keyed by epoch time plus one shared world anchor.
Factors are linearized in the states' local coordinates; pseudorange and
double-difference factors are linearized in vectorized batches since they
dominate the factor count. Assembly order is fixed (epoch, constellation,
band, satellite id), so runs are reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .constants import GRAVITY, SPEED_OF_LIGHT
from .errors import (
    ConfigError,
    InsufficientImu,
    NonMonotonicTime,
    NumericalFailure,
    SingularMarginalBlock,
)
from .factors import (
    ANCHOR_DOF,
    SL_POS,
    STATE_DOF,
    ImuNoise,
    ImuSample,
    NavState,
    OdometryMeasurement,
    PreintegratedImu,
    RobustLoss,
    WorldAnchor,
    dd_carrier_residual,
    imu_preintegrate,
    imu_residual,
    odometry_residual,
    predict_state,
    pseudorange_residual,
    pseudorange_terms,
    robust_cost,
    solve_point_position,
)
from .geodesy import ecef_to_geodetic, local_axes
from .gnss import (
    NUM_CONSTELLATIONS,
    AtmosphereConfig,
    DD_SIGMA_DEFAULT,
    DdCarrierMeasurement,
    SatelliteObservation,
    build_dd_measurements,
    line_of_sight,
)
from .so3 import hat, right_jacobian_inv

MODES = ("gnss-imu", "gnss-imu-odom", "carrier-only")


@dataclass
class SolverConfig:
    """Estimator and solver settings; defaults follow the library conventions."""

    mode: str = "gnss-imu"
    lag: float = 10.0
    outlier_gate: float = 5.0
    huber_k: float = 1.345
    max_iterations: int = 25
    lm_lambda_init: float = 1e-8
    lm_lambda_factor: float = 10.0
    rel_cost_tol: float = 1e-9
    step_tol: float = 1e-10
    pseudorange_sigma_floor: float = 0.5
    dd_sigma: float = DD_SIGMA_DEFAULT
    carrier_sigma: float = 0.005
    clock_prior_sigma: float = 1e-3       # s, only for unobserved constellations
    weak_prior_sigma: float = 1e3
    motion_prior_sigma: float = 10.0      # carrier-only connectivity prior
    bias_prior_gyro: float = 0.05
    bias_prior_accel: float = 0.5
    init_min_extra_obs: int = 4           # need >= extra + #constellations observations
    start_position_ecef: tuple | None = None   # carrier-only pinned start
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    atmosphere: AtmosphereConfig = field(default_factory=AtmosphereConfig)
    max_imu_gap: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        for name in ("lag", "outlier_gate", "huber_k", "max_iterations",
                     "lm_lambda_factor", "rel_cost_tol", "step_tol"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def gnss_loss(self) -> RobustLoss:
        return RobustLoss("huber", self.huber_k)


# --------------------------------------------------------------------------
# Factor records
# --------------------------------------------------------------------------

@dataclass
class StatePrior:
    key: float
    ref: NavState
    dims: np.ndarray
    sigmas: np.ndarray
    kind: str = "prior"


@dataclass
class AnchorPrior:
    ref: WorldAnchor
    dims: np.ndarray
    sigmas: np.ndarray
    kind: str = "prior"


@dataclass
class ImuFactor:
    key_i: float
    key_j: float
    pim: PreintegratedImu
    kind: str = "imu"

    def __post_init__(self):
        # rows of inv_sqrt whiten residual/Jacobian by matmul
        self.inv_sqrt = np.linalg.inv(np.linalg.cholesky(self.pim.cov))


@dataclass
class OdomFactor:
    key_i: float
    key_j: float
    meas: OdometryMeasurement
    kind: str = "odometry"

    def __post_init__(self):
        self.inv_sqrt = np.linalg.inv(np.linalg.cholesky(self.meas.cov))


@dataclass
class PrFactor:
    key: float
    obs: SatelliteObservation
    sigma: float
    kind: str = "pseudorange"


@dataclass
class DdFactor:
    key_i: float
    key_j: float
    meas: DdCarrierMeasurement
    sigma: float
    kind: str = "dd_carrier"


@dataclass
class RelPosFactor:
    """Linear relative-position factor: (p_j - p_i - delta) / sigma."""

    key_i: float
    key_j: float
    delta: np.ndarray
    sigma: float
    kind: str = "motion_prior"


@dataclass
class MarginalPrior:
    """Gaussian prior from Schur-complement marginalization.

    Residual A @ delta - rhs, with delta the stacked active local coordinates
    of the referenced variables around the stored linearization points.
    """

    keys: list                      # state keys in order; "anchor" last if present
    refs: dict                      # key -> NavState/WorldAnchor snapshot
    sqrt_info: np.ndarray           # A
    rhs: np.ndarray
    kind: str = "marginal_prior"


@dataclass
class RejectionRecord:
    t: float
    kind: str
    sat_id: str
    whitened: float


@dataclass
class EpochInput:
    timestamp: float
    gnss: list = field(default_factory=list)
    odometry: OdometryMeasurement | None = None
    imu: list = field(default_factory=list)


@dataclass
class EpochEstimate:
    t: float
    state: NavState
    anchor: WorldAnchor
    pos_cov: np.ndarray
    cost: float
    breakdown: dict
    iterations: int
    rejected: list


# --------------------------------------------------------------------------
# Sliding window
# --------------------------------------------------------------------------

def _active_dims(mode: str) -> np.ndarray:
    if mode == "carrier-only":
        return np.arange(3, 6)
    return np.arange(STATE_DOF)


class SlidingWindow:
    """Time-ordered states, shared anchor, factor list and marginal prior."""

    def __init__(self, cfg: SolverConfig):
        self.cfg = cfg
        self.states: dict[float, NavState] = {}
        self.order: list[float] = []
        self.anchor = WorldAnchor.identity()
        self.anchor_free = cfg.mode == "gnss-imu-odom"
        self.factors: list = []
        self.marginal: MarginalPrior | None = None
        self.gravity = np.array([0.0, 0.0, -GRAVITY])
        self.active = _active_dims(cfg.mode)
        self._lu = None
        self._col_of: dict = {}
        self._rev = 0
        self._cache = None

    def add_state(self, t: float, state: NavState):
        if self.order and t <= self.order[-1]:
            raise NonMonotonicTime(f"epoch {t} not after {self.order[-1]}")
        self.states[t] = state
        self.order.append(t)
        self._rev += 1

    def add_factor(self, factor):
        self.factors.append(factor)
        self._rev += 1

    def newest(self) -> float:
        return self.order[-1]

    def state_dim(self) -> int:
        return len(self.active)

    def columns(self) -> tuple[dict, int]:
        """Column offset per variable key; anchor last."""
        col = {}
        off = 0
        for t in self.order:
            col[t] = off
            off += len(self.active)
        if self.anchor_free:
            col["anchor"] = off
            off += ANCHOR_DOF
        return col, off

    def retract_all(self, step: np.ndarray, col: dict) -> None:
        nd = len(self.active)
        for t in self.order:
            delta = np.zeros(STATE_DOF)
            delta[self.active] = step[col[t]: col[t] + nd]
            self.states[t] = self.states[t].retract(delta)
        if self.anchor_free:
            self.anchor = self.anchor.retract(step[col["anchor"]: col["anchor"] + ANCHOR_DOF])

    def snapshot(self):
        states = {t: s.copy() for t, s in self.states.items()}
        return states, self.anchor.copy()

    def restore(self, snap):
        states, anchor = snap
        self.states = {t: s.copy() for t, s in states.items()}
        self.anchor = anchor.copy()


# --------------------------------------------------------------------------
# Linearization
# --------------------------------------------------------------------------

class _Triplets:
    def __init__(self):
        self.rows = []
        self.cols = []
        self.vals = []

    def add_block(self, row0: int, cols: np.ndarray, block: np.ndarray):
        """block (m, k) at rows row0.., explicit column indices cols (k,)."""
        m, k = block.shape
        r = np.repeat(np.arange(row0, row0 + m), k)
        c = np.tile(cols, m)
        self.rows.append(r)
        self.cols.append(c)
        self.vals.append(block.reshape(-1))

    def matrix(self, n_rows: int, n_cols: int) -> sp.csr_matrix:
        if not self.rows:
            return sp.csr_matrix((n_rows, n_cols))
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        vals = np.concatenate(self.vals)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n_rows, n_cols))


def _state_cols(window: SlidingWindow, col: dict, key: float, dims: np.ndarray) -> np.ndarray:
    """Columns of the given full-state dims; -1 where inactive."""
    base = col[key]
    lookup = -np.ones(STATE_DOF, dtype=int)
    lookup[window.active] = np.arange(len(window.active))
    out = lookup[dims]
    mask = out >= 0
    res = np.where(mask, base + out, -1)
    return res


def linearize(window: SlidingWindow, want_jac: bool = True):
    """Whitened, robust-weighted residuals and sparse Jacobian of the window.

    Returns (J, r, cost, breakdown, row_meta); J is None when want_jac=False.
    Raises NumericalFailure naming the offending factor on non-finite values.
    """
    cfg = window.cfg
    col, n_cols = window.columns()
    trip = _Triplets() if want_jac else None
    res_parts = []
    row_meta = []
    row0 = 0
    cost = 0.0
    breakdown: dict[str, float] = {}
    loss = cfg.gnss_loss()
    nd = len(window.active)
    anchor = window.anchor

    lookup = -np.ones(STATE_DOF, dtype=int)
    lookup[window.active] = np.arange(nd)

    if window._cache is not None and window._cache["rev"] == window._rev:
        cache = window._cache
    else:
        pr_l = [f for f in window.factors if isinstance(f, PrFactor)]
        dd_l = [f for f in window.factors if isinstance(f, DdFactor)]
        cache = {
            "rev": window._rev,
            "pr": pr_l,
            "dd": dd_l,
            "others": [f for f in window.factors if not isinstance(f, (PrFactor, DdFactor))],
        }
        oidx0 = {t: n for n, t in enumerate(window.order)}
        if pr_l:
            cache["pr_sat"] = np.vstack([f.obs.sat_pos for f in pr_l])
            cache["pr_corr"] = np.array([f.obs.corrected_pseudorange() for f in pr_l])
            cache["pr_iono"] = np.array([cfg.atmosphere.iono_zenith_for(f.obs.band) for f in pr_l])
            cache["pr_g"] = np.array([int(f.obs.constellation) for f in pr_l])
            cache["pr_sig"] = np.array([f.sigma for f in pr_l])
            cache["pr_sidx"] = np.array([oidx0[f.key] for f in pr_l])
        if dd_l:
            cache["dd_sat"] = np.vstack([
                np.stack([f.meas.other_pos_j, f.meas.pivot_pos_j,
                          f.meas.other_pos_i, f.meas.pivot_pos_i])
                for f in dd_l])
            cache["dd_val"] = np.array([f.meas.value for f in dd_l])
            cache["dd_sig"] = np.array([f.sigma for f in dd_l])
            cache["dd_si"] = np.array([oidx0[f.key_i] for f in dd_l])
            cache["dd_sj"] = np.array([oidx0[f.key_j] for f in dd_l])
        window._cache = cache
    pr_list = cache["pr"]
    dd_list = cache["dd"]
    others = cache["others"]

    def bump(kind, c):
        breakdown[kind] = breakdown.get(kind, 0.0) + c

    # ---- per-factor types -------------------------------------------------
    for f in others:
        if isinstance(f, StatePrior):
            x = window.states[f.key]
            full = f.ref.local(x)
            r = full[f.dims] / f.sigmas
            jac_cols = _state_cols(window, col, f.key, f.dims)
            block = np.diag(1.0 / f.sigmas)
            # exact Jacobian for rotation dims of the prior
            if want_jac and np.any(f.dims < 3):
                rot_sel = np.where(f.dims < 3)[0]
                if len(rot_sel) == 3:
                    block[np.ix_(rot_sel, rot_sel)] = (
                        right_jacobian_inv(full[0:3]) / f.sigmas[rot_sel][:, None])
        elif isinstance(f, AnchorPrior):
            full = f.ref.local(anchor)
            r = full[f.dims] / f.sigmas
            jac_cols = col["anchor"] + f.dims if window.anchor_free else None
            block = np.diag(1.0 / f.sigmas)
            if jac_cols is None:
                continue
        elif isinstance(f, ImuFactor):
            r15, ji, jj = imu_residual(window.states[f.key_i], window.states[f.key_j],
                                       f.pim, window.gravity)
            r = f.inv_sqrt @ r15
            if want_jac:
                jwi = f.inv_sqrt @ ji[:, window.active]
                jwj = f.inv_sqrt @ jj[:, window.active]
                trip.add_block(row0, np.arange(col[f.key_i], col[f.key_i] + nd), jwi)
                trip.add_block(row0, np.arange(col[f.key_j], col[f.key_j] + nd), jwj)
            jac_cols = None
            block = None
        elif isinstance(f, OdomFactor):
            r6, ji, jj = odometry_residual(window.states[f.key_i], window.states[f.key_j], f.meas)
            r = f.inv_sqrt @ r6
            if want_jac:
                jwi = f.inv_sqrt @ ji[:, window.active]
                jwj = f.inv_sqrt @ jj[:, window.active]
                trip.add_block(row0, np.arange(col[f.key_i], col[f.key_i] + nd), jwi)
                trip.add_block(row0, np.arange(col[f.key_j], col[f.key_j] + nd), jwj)
            jac_cols = None
            block = None
        elif isinstance(f, RelPosFactor):
            pi = window.states[f.key_i].pos
            pj = window.states[f.key_j].pos
            r = (pj - pi - f.delta) / f.sigma
            if want_jac:
                eye = np.eye(3) / f.sigma
                trip.add_block(row0, _state_cols(window, col, f.key_i, np.arange(3, 6)), -eye)
                trip.add_block(row0, _state_cols(window, col, f.key_j, np.arange(3, 6)), eye)
            jac_cols = None
            block = None
        elif isinstance(f, MarginalPrior):
            delta = []
            cols_list = []
            for key in f.keys:
                if key == "anchor":
                    delta.append(f.refs[key].local(anchor))
                    cols_list.append(np.arange(col["anchor"], col["anchor"] + ANCHOR_DOF))
                else:
                    delta.append(f.refs[key].local(window.states[key])[window.active])
                    cols_list.append(np.arange(col[key], col[key] + nd))
            delta = np.concatenate(delta)
            r = f.sqrt_info @ delta - f.rhs
            if want_jac:
                allcols = np.concatenate(cols_list)
                trip.add_block(row0, allcols, f.sqrt_info)
            jac_cols = None
            block = None
        else:
            raise NumericalFailure(f"unknown factor type {type(f).__name__}", f)

        if not np.all(np.isfinite(r)):
            raise NumericalFailure(f"non-finite residual in {f.kind} factor", f)
        if want_jac and block is not None:
            keep = jac_cols >= 0
            if np.any(keep):
                trip.add_block(row0, jac_cols[keep], block[:, keep])
        res_parts.append(r)
        row_meta.append((f.kind, row0, len(r)))
        c = float(r @ r)
        cost += c
        bump(f.kind, c)
        row0 += len(r)

    oidx = {t: n for n, t in enumerate(window.order)}
    nd_all = len(window.active)
    pos_off = lookup[3:6]            # offsets of position dims inside active
    clk_off = lookup[15:19]
    p_w = np.array([window.states[t].pos for t in window.order])
    p_e = anchor.transform_many(p_w) if window.order else p_w

    # ---- pseudorange batch --------------------------------------------------
    if pr_list:
        sidx = cache["pr_sidx"]
        clocks = np.array([window.states[t].clock for t in window.order])
        rec = p_e[sidx]
        sat_pos = cache["pr_sat"]
        corr = cache["pr_corr"]
        iono = cache["pr_iono"]
        g_of = cache["pr_g"]
        sig = cache["pr_sig"]
        model, d_model, _ = pseudorange_terms(rec, sat_pos, iono, cfg.atmosphere,
                                              gradients=want_jac)
        r = model + clocks[sidx, g_of] * SPEED_OF_LIGHT - corr
        rw = r / sig
        if not np.all(np.isfinite(rw)):
            bad = int(np.where(~np.isfinite(rw))[0][0])
            raise NumericalFailure(
                f"non-finite pseudorange residual for {pr_list[bad].obs.sat_id}",
                pr_list[bad])
        aw = np.abs(rw)
        w = np.where(aw > loss.k, loss.k / np.maximum(aw, 1e-300), 1.0)
        scale = np.sqrt(w) / sig
        c_each = np.where(aw > loss.k, 2.0 * loss.k * aw - loss.k**2, rw * rw)
        cost += float(c_each.sum())
        bump("pseudorange", float(c_each.sum()))
        if want_jac:
            n = len(pr_list)
            rows = row0 + np.arange(n)
            d_pos = (d_model @ anchor.rotation) * scale[:, None]
            base = sidx * nd_all
            trip.rows.append(np.repeat(rows, 3))
            trip.cols.append((base[:, None] + pos_off[None, :]).reshape(-1))
            trip.vals.append(d_pos.reshape(-1))
            if clk_off[0] >= 0:
                trip.rows.append(rows)
                trip.cols.append(base + clk_off[g_of])
                trip.vals.append(scale)
            if window.anchor_free:
                j_alpha = -np.cross(d_pos, p_w[sidx])      # includes scale
                block = np.concatenate([j_alpha, d_model * scale[:, None]], axis=1)
                trip.rows.append(np.repeat(rows, ANCHOR_DOF))
                trip.cols.append(np.tile(np.arange(col["anchor"], col["anchor"] + ANCHOR_DOF), n))
                trip.vals.append(block.reshape(-1))
        res_parts.append(rw * np.sqrt(w))
        row_meta.append(("pseudorange", row0, len(pr_list)))
        row0 += len(pr_list)

    # ---- double-difference batch --------------------------------------------
    if dd_list:
        si = cache["dd_si"]
        sj = cache["dd_sj"]
        sats = cache["dd_sat"]                           # (4K, 3)
        recs = np.stack([p_e[sj], p_e[sj], p_e[si], p_e[si]], axis=1).reshape(-1, 3)
        geom = line_of_sight(sats, recs, gradients=want_jac)
        rng4 = geom["rng"].reshape(-1, 4)
        vals = cache["dd_val"]
        sig = cache["dd_sig"]
        r = (rng4[:, 0] - rng4[:, 1]) - (rng4[:, 2] - rng4[:, 3]) - vals
        rw = r / sig
        if not np.all(np.isfinite(rw)):
            bad = int(np.where(~np.isfinite(rw))[0][0])
            raise NumericalFailure(
                f"non-finite DD residual for {dd_list[bad].meas.other_id}", dd_list[bad])
        aw = np.abs(rw)
        w = np.where(aw > loss.k, loss.k / np.maximum(aw, 1e-300), 1.0)
        scale = np.sqrt(w) / sig
        c_each = np.where(aw > loss.k, 2.0 * loss.k * aw - loss.k**2, rw * rw)
        cost += float(c_each.sum())
        bump("dd_carrier", float(c_each.sum()))
        if want_jac:
            n = len(dd_list)
            rows = row0 + np.arange(n)
            dr4 = geom["d_rng"].reshape(-1, 4, 3)
            grad_j = dr4[:, 0] - dr4[:, 1]
            grad_i = dr4[:, 2] - dr4[:, 3]
            gj_pos = (grad_j @ anchor.rotation) * scale[:, None]
            gi_pos = (grad_i @ anchor.rotation) * scale[:, None]
            base_i = si * nd_all
            base_j = sj * nd_all
            trip.rows.append(np.repeat(rows, 3))
            trip.cols.append((base_j[:, None] + pos_off[None, :]).reshape(-1))
            trip.vals.append(gj_pos.reshape(-1))
            trip.rows.append(np.repeat(rows, 3))
            trip.cols.append((base_i[:, None] + pos_off[None, :]).reshape(-1))
            trip.vals.append((-gi_pos).reshape(-1))
            if window.anchor_free:
                j_alpha = np.cross(gi_pos, p_w[si]) - np.cross(gj_pos, p_w[sj])
                block = np.concatenate(
                    [j_alpha, (grad_j - grad_i) * scale[:, None]], axis=1)
                trip.rows.append(np.repeat(rows, ANCHOR_DOF))
                trip.cols.append(np.tile(np.arange(col["anchor"], col["anchor"] + ANCHOR_DOF), n))
                trip.vals.append(block.reshape(-1))
        res_parts.append(rw * np.sqrt(w))
        row_meta.append(("dd_carrier", row0, len(dd_list)))
        row0 += len(dd_list)

    r_all = np.concatenate(res_parts) if res_parts else np.zeros(0)
    jac = trip.matrix(row0, n_cols) if want_jac else None
    return jac, r_all, cost, breakdown, col


def optimize(window: SlidingWindow, cfg: SolverConfig | None = None):
    """Levenberg-Marquardt to convergence; accepted steps never increase the
    robust cost. Returns (cost, breakdown, iterations)."""
    cfg = cfg or window.cfg
    lam = cfg.lm_lambda_init
    jac, r, cost, breakdown, col = linearize(window)
    iterations = 0
    for _ in range(cfg.max_iterations):
        h = (jac.T @ jac).tocsc()
        grad = jac.T @ r
        if np.max(np.abs(grad)) < 1e-12:
            break
        accepted = False
        snap = window.snapshot()
        for _ in range(30):
            damped = h + sp.diags(lam * np.maximum(h.diagonal(), 1e-12))
            try:
                lu = spl.splu(damped)
                step = lu.solve(-grad)
            except RuntimeError:
                lam *= cfg.lm_lambda_factor
                continue
            if not np.all(np.isfinite(step)):
                lam *= cfg.lm_lambda_factor
                continue
            window.retract_all(step, col)
            _, _, new_cost, new_breakdown, _ = linearize(window, want_jac=False)
            if new_cost <= cost:
                accepted = True
                lam = max(lam / 3.0, 1e-12)
                break
            window.restore(snap)
            if new_cost - cost <= cfg.rel_cost_tol * max(cost, 1.0):
                break  # within numerical noise of a stationary point
            lam *= cfg.lm_lambda_factor
            if lam > 1e10:
                break
        if not accepted:
            break
        iterations += 1
        # relative decrease with a unit floor: whitened costs are dimensionless
        converged = (cost - new_cost < cfg.rel_cost_tol * max(cost, 1.0)
                     or np.max(np.abs(step)) < cfg.step_tol)
        jac, r, cost, breakdown, col = linearize(window)
        if converged:
            break
    # keep the undamped factorization for covariance queries
    h = (jac.T @ jac).tocsc()
    try:
        window._lu = spl.splu(h)
    except RuntimeError:
        window._lu = spl.splu((h + sp.diags(np.full(h.shape[0], 1e-9))).tocsc())
    window._col_of = col
    return cost, breakdown, iterations


def marginal_covariance(window: SlidingWindow, key) -> np.ndarray:
    """Marginal covariance of a variable's active local coordinates."""
    if window._lu is None:
        raise NumericalFailure("optimize() must run before covariance queries")
    col = window._col_of
    n = len(window.active) if key != "anchor" else ANCHOR_DOF
    base = col[key]
    total = window._lu.shape[0]
    rhs = np.zeros((total, n))
    rhs[base: base + n] = np.eye(n)
    sol = window._lu.solve(rhs)
    return sol[base: base + n]


# --------------------------------------------------------------------------
# Outlier gate
# --------------------------------------------------------------------------

def gate_outliers(window: SlidingWindow, candidates: list, cfg: SolverConfig,
                  skip: bool = False):
    """Threshold gate on whitened GNSS residuals at the current estimate.

    Returns (accepted, rejections). IMU/odometry factors are never gated.
    When every pseudorange candidate fails (e.g. reacquisition after a long
    outage with accumulated dead-reckoning drift), the gate steps aside and
    leaves the epoch to the robust loss.
    """
    if skip:
        return list(candidates), []
    pr = [f for f in candidates if isinstance(f, PrFactor)]
    dd = [f for f in candidates if isinstance(f, DdFactor)]
    other = [f for f in candidates if not isinstance(f, (PrFactor, DdFactor))]
    accepted = list(other)
    rejected: list[tuple] = []

    if pr:
        rec = np.vstack([window.anchor.transform(window.states[f.key].pos) for f in pr])
        sat = np.vstack([f.obs.sat_pos for f in pr])
        iono = np.array([cfg.atmosphere.iono_zenith_for(f.obs.band) for f in pr])
        model, _, _ = pseudorange_terms(rec, sat, iono, cfg.atmosphere)
        r = model + np.array([
            SPEED_OF_LIGHT * window.states[f.key].clock[int(f.obs.constellation)]
            - f.obs.corrected_pseudorange() for f in pr])
        white = np.abs(r) / np.array([f.sigma for f in pr])
        bad = white > cfg.outlier_gate
        if np.all(bad):
            # all-rejected fallback (e.g. reacquisition after a long outage
            # with dead-reckoning drift): keep everything, the robust loss
            # limits the damage
            accepted.extend(pr)
        else:
            for f, w, b in zip(pr, white, bad):
                if b:
                    rejected.append((f, RejectionRecord(f.key, "pseudorange",
                                                        f.obs.sat_id, float(w))))
                else:
                    accepted.append(f)
    for f in dd:
        r, _, _, _ = dd_carrier_residual(window.states[f.key_i], window.states[f.key_j],
                                         window.anchor, f.meas)
        white = abs(r) / f.sigma
        if white > cfg.outlier_gate:
            rejected.append((f, RejectionRecord(f.key_j, "dd_carrier",
                                                f.meas.other_id, white)))
        else:
            accepted.append(f)
    return accepted, [rec for _, rec in rejected]


# --------------------------------------------------------------------------
# Marginalization
# --------------------------------------------------------------------------

def _factor_keys(f) -> list:
    if isinstance(f, (StatePrior, PrFactor)):
        return [f.key]
    if isinstance(f, AnchorPrior):
        return ["anchor"]
    if isinstance(f, (ImuFactor, OdomFactor, RelPosFactor, DdFactor)):
        return [f.key_i, f.key_j]
    if isinstance(f, MarginalPrior):
        return list(f.keys)
    return []


def _touches_anchor(f) -> bool:
    return isinstance(f, (PrFactor, DdFactor, AnchorPrior)) or (
        isinstance(f, MarginalPrior) and "anchor" in f.keys)


def marginalize(window: SlidingWindow, cfg: SolverConfig | None = None):
    """Fold states older than (newest - lag) into a Gaussian marginal prior.

    Schur complement at the current linearization; the anchor is never
    removed. No-op when nothing falls outside the lag.
    """
    cfg = cfg or window.cfg
    cutoff = window.newest() - cfg.lag
    removed = [t for t in window.order if t < cutoff and t != window.newest()]
    if not removed:
        return
    removed_set = set(removed)

    move = []
    keep = []
    for f in window.factors:
        if any(k in removed_set for k in _factor_keys(f) if k != "anchor"):
            move.append(f)
        else:
            keep.append(f)

    sep_states = sorted({k for f in move for k in _factor_keys(f)
                         if k != "anchor" and k not in removed_set})
    use_anchor = window.anchor_free and any(_touches_anchor(f) for f in move)
    var_keys = removed + sep_states + (["anchor"] if use_anchor else [])

    # dense joint information of the moved factors in a temporary sub-window
    sub = SlidingWindow(cfg)
    sub.anchor = window.anchor
    sub.anchor_free = use_anchor
    sub.gravity = window.gravity
    sub.active = window.active
    for t in removed + sep_states:
        sub.states[t] = window.states[t]
        sub.order.append(t)
    sub.order.sort()
    sub.factors = move
    jac, r, _, _, col = linearize(sub)
    jd = np.asarray(jac.todense())
    h = jd.T @ jd
    b = -jd.T @ r

    nd = len(window.active)
    rem_idx = np.concatenate([np.arange(col[t], col[t] + nd) for t in removed])
    sep_cols = []
    for t in sep_states:
        sep_cols.append(np.arange(col[t], col[t] + nd))
    if use_anchor:
        sep_cols.append(np.arange(col["anchor"], col["anchor"] + ANCHOR_DOF))
    if not sep_cols:
        window.factors = keep
        for t in removed:
            del window.states[t]
            window.order.remove(t)
        window._rev += 1
        return
    sep_idx = np.concatenate(sep_cols)

    h_rr = h[np.ix_(rem_idx, rem_idx)]
    h_rs = h[np.ix_(rem_idx, sep_idx)]
    h_ss = h[np.ix_(sep_idx, sep_idx)]
    b_r = b[rem_idx]
    b_s = b[sep_idx]
    try:
        chol = cho_factor(h_rr + np.eye(len(rem_idx)) * 1e-12)
    except np.linalg.LinAlgError as ex:
        raise SingularMarginalBlock(
            f"removed states {removed} are structurally unconstrained") from ex
    h_new = h_ss - h_rs.T @ cho_solve(chol, h_rs)
    b_new = b_s - h_rs.T @ cho_solve(chol, b_r)
    h_new = 0.5 * (h_new + h_new.T)

    evals, evecs = np.linalg.eigh(h_new)
    tol = max(1e-12 * max(evals.max(), 0.0), 1e-14)
    pos = evals > tol
    a_mat = (np.sqrt(evals[pos])[:, None] * evecs[:, pos].T)
    rhs = (evecs[:, pos].T @ b_new) / np.sqrt(evals[pos])

    refs = {t: window.states[t].copy() for t in sep_states}
    if use_anchor:
        refs["anchor"] = window.anchor.copy()
    prior = MarginalPrior(keys=sep_states + (["anchor"] if use_anchor else []),
                          refs=refs, sqrt_info=a_mat, rhs=rhs)

    window.factors = keep + [prior] if a_mat.size else keep
    for t in removed:
        del window.states[t]
        window.order.remove(t)
    window._rev += 1


# --------------------------------------------------------------------------
# Fixed-lag smoother driver
# --------------------------------------------------------------------------

class FixedLagSmoother:
    """Streaming estimator: one add_epoch call per created state."""

    def __init__(self, cfg: SolverConfig):
        self.cfg = cfg
        self.window = SlidingWindow(cfg)
        self.initialized = False
        self.last_gnss: tuple[float, list] | None = None
        self.rejections: list[RejectionRecord] = []
        self._last_rejections: list[RejectionRecord] = []
        self._first_gate_done = False

    # -------------------------------------------------------------- helpers
    def _check_imu(self, samples: list, t0: float, t1: float):
        if not samples:
            raise InsufficientImu(f"no IMU samples in [{t0}, {t1}]")
        times = [s.t for s in samples]
        gaps = [times[0] - t0] + [b - a for a, b in zip(times, times[1:])] + [t1 - times[-1]]
        if max(gaps) > self.cfg.max_imu_gap:
            raise InsufficientImu(
                f"IMU gap {max(gaps):.3f} s exceeds {self.cfg.max_imu_gap} s in [{t0}, {t1}]")

    def _gnss_candidates(self, t: float, state: NavState, obs_list: list) -> list:
        cfg = self.cfg
        out = []
        p_e = self.window.anchor.transform(state.pos)
        if obs_list:
            sats = np.vstack([o.sat_pos for o in obs_list])
            sin_el = line_of_sight(sats, p_e)["sin_el"]
            cut = math.sin(cfg.atmosphere.elevation_cutoff)
            for o, se in sorted(zip(obs_list, sin_el),
                                key=lambda p: (int(p[0].constellation), p[0].band.label, p[0].sat_id)):
                if se < cut:
                    continue
                rep = o.reported_std if o.reported_std else 0.0
                sigma = max(rep, cfg.pseudorange_sigma_floor) / max(se, cut)
                out.append(PrFactor(t, o, sigma))
        if self.last_gnss is not None and obs_list:
            t_i, prev_obs = self.last_gnss
            if t_i in self.window.states:
                for m in build_dd_measurements(prev_obs, obs_list, cfg.dd_sigma):
                    out.append(DdFactor(t_i, t, m, cfg.dd_sigma))
        return out

    def _init_from_point_solution(self, t: float, obs_list: list):
        cfg = self.cfg
        sol = solve_point_position(obs_list, cfg.atmosphere)
        consts = {int(o.constellation) for o in obs_list}
        if not sol.converged or len(obs_list) < cfg.init_min_extra_obs + len(consts):
            return None
        geo = ecef_to_geodetic(sol.pos)
        east, north, up = local_axes(np.array([geo.latitude]), np.array([geo.longitude]))
        r_enu = np.column_stack([east[0], north[0], up[0]])

        window = self.window
        if cfg.mode == "gnss-imu":
            state = NavState(r_enu, sol.pos.copy(), np.zeros(3),
                             np.zeros(3), np.zeros(3), sol.clock.copy())
            window.gravity = -GRAVITY * up[0]
            window.add_state(t, state)
            window.add_factor(StatePrior(t, state.copy(), np.arange(0, 3),
                                         np.full(3, 1e2)))
            window.add_factor(StatePrior(t, state.copy(), np.arange(6, 9),
                                         np.full(3, 1e2)))
        else:  # gnss-imu-odom: local frame gauge-fixed at the start pose
            state = NavState.identity()
            state.clock = sol.clock.copy()
            window.anchor = WorldAnchor(r_enu, sol.pos.copy())
            window.gravity = np.array([0.0, 0.0, -GRAVITY])
            window.add_state(t, state)
            window.add_factor(StatePrior(t, state.copy(), np.arange(0, 6),
                                         np.full(6, 1e-4)))
            window.add_factor(StatePrior(t, state.copy(), np.arange(6, 9),
                                         np.full(3, 1e1)))
            window.add_factor(AnchorPrior(window.anchor.copy(), np.arange(6),
                                          np.array([1e2] * 3 + [1e4] * 3)))
        window.add_factor(StatePrior(t, state.copy(), np.arange(9, 12),
                                     np.full(3, cfg.bias_prior_gyro)))
        window.add_factor(StatePrior(t, state.copy(), np.arange(12, 15),
                                     np.full(3, cfg.bias_prior_accel)))
        return state

    def _add_clock_priors(self, t: float, state: NavState, observed: set):
        sig_m = self.cfg.clock_prior_sigma * SPEED_OF_LIGHT
        for g in range(NUM_CONSTELLATIONS):
            if g not in observed:
                ref = state.copy()
                ref.clock = state.clock.copy()
                ref.clock[g] = state.clock[g]
                self.window.add_factor(StatePrior(t, ref, np.array([15 + g]),
                                                  np.array([sig_m])))

    # -------------------------------------------------------------- add_epoch
    def add_epoch(self, epoch: EpochInput) -> EpochEstimate | None:
        cfg = self.cfg
        window = self.window
        t = epoch.timestamp
        if window.order and t <= window.newest():
            raise NonMonotonicTime(f"epoch {t} not after {window.newest()}")

        if cfg.mode == "carrier-only":
            est = self._add_epoch_carrier_only(epoch)
        else:
            est = self._add_epoch_gnss(epoch)
        if est is not None and epoch.gnss:
            self.last_gnss = (t, epoch.gnss)
        return est

    def _add_epoch_gnss(self, epoch: EpochInput) -> EpochEstimate | None:
        cfg = self.cfg
        window = self.window
        t = epoch.timestamp

        if not self.initialized:
            if not epoch.gnss:
                return None
            state = self._init_from_point_solution(t, epoch.gnss)
            if state is None:
                return None
            self.initialized = True
            candidates = self._gnss_candidates(t, state, epoch.gnss)
            accepted, rej = gate_outliers(window, candidates, cfg, skip=True)
            for f in accepted:
                window.add_factor(f)
            self._add_clock_priors(t, state, {int(o.constellation) for o in epoch.gnss})
        else:
            t_prev = window.newest()
            self._check_imu(epoch.imu, t_prev, t)
            prev = window.states[t_prev]
            pim = imu_preintegrate(epoch.imu, t_prev, t, prev.bias_gyro,
                                   prev.bias_accel, cfg.imu_noise)
            state = predict_state(prev, pim, window.gravity)
            window.add_state(t, state)
            window.add_factor(ImuFactor(t_prev, t, pim))
            if epoch.odometry is not None and cfg.mode == "gnss-imu-odom":
                m = epoch.odometry
                if m.t_i in window.states and abs(m.t_j - t) < 1e-6:
                    window.add_factor(OdomFactor(m.t_i, t, m))
            candidates = self._gnss_candidates(t, state, epoch.gnss)
            accepted, rej = gate_outliers(window, candidates, cfg)
            self.rejections.extend(rej)
            self._last_rejections = rej
            for f in accepted:
                window.add_factor(f)
            self._add_clock_priors(t, state,
                                   {int(f.obs.constellation) for f in accepted
                                    if isinstance(f, PrFactor)})

        cost, breakdown, iters = optimize(window, cfg)
        est = self._snapshot_estimate(t, cost, breakdown, iters)
        marginalize(window, cfg)
        return est

    def _add_epoch_carrier_only(self, epoch: EpochInput) -> EpochEstimate | None:
        cfg = self.cfg
        window = self.window
        t = epoch.timestamp
        if not self.initialized:
            if not epoch.gnss:
                return None
            if cfg.start_position_ecef is None:
                raise ConfigError("carrier-only mode needs start_position_ecef")
            state = NavState.identity()
            state.pos = np.array(cfg.start_position_ecef, dtype=float)
            window.add_state(t, state)
            window.add_factor(StatePrior(t, state.copy(), np.arange(3, 6),
                                         np.full(3, 1e-4)))
            self.initialized = True
        else:
            t_prev = window.newest()
            prev = window.states[t_prev]
            state = prev.copy()
            if len(window.order) >= 2:
                # constant-velocity extrapolation keeps the gate meaningful
                before = window.states[window.order[-2]]
                dt_prev = t_prev - window.order[-2]
                if dt_prev > 0:
                    state.pos = prev.pos + (prev.pos - before.pos) * ((t - t_prev) / dt_prev)
            window.add_state(t, state)
            window.add_factor(RelPosFactor(t_prev, t, np.zeros(3), cfg.motion_prior_sigma))
            candidates = self._gnss_candidates(t, state, epoch.gnss)
            dd_only = [f for f in candidates if isinstance(f, DdFactor)]
            accepted, rej = gate_outliers(window, dd_only, cfg,
                                          skip=not self._first_gate_done)
            self._first_gate_done = True
            self.rejections.extend(rej)
            self._last_rejections = rej
            for f in accepted:
                window.add_factor(f)
        cost, breakdown, iters = optimize(window, cfg)
        est = self._snapshot_estimate(t, cost, breakdown, iters)
        marginalize(window, cfg)
        return est

    def _snapshot_estimate(self, t: float, cost: float, breakdown: dict,
                           iters: int) -> EpochEstimate:
        window = self.window
        cov = marginal_covariance(window, t)
        nd = len(window.active)
        pos_cov = np.zeros((3, 3))
        lookup = {d: n for n, d in enumerate(window.active)}
        for a in range(3):
            for b in range(3):
                da, db = 3 + a, 3 + b
                if da in lookup and db in lookup:
                    pos_cov[a, b] = cov[lookup[da], lookup[db]]
        return EpochEstimate(t=t, state=window.states[t].copy(),
                             anchor=window.anchor.copy(), pos_cov=pos_cov,
                             cost=cost, breakdown=breakdown, iterations=iters,
                             rejected=list(self._last_rejections))


def estimate_output(window: SlidingWindow) -> dict:
    """Pose/velocity/bias/clock of the newest state in W and E."""
    t = window.newest()
    st = window.states[t]
    p_e = window.anchor.transform(st.pos)
    geo = ecef_to_geodetic(p_e)
    cov = marginal_covariance(window, t)
    return {
        "t": t,
        "state": st.copy(),
        "position_w": st.pos.copy(),
        "position_e": p_e,
        "geodetic": geo,
        "rotation_e": window.anchor.rotation @ st.rot,
        "velocity_body": st.vel.copy(),
        "clock": st.clock.copy(),
        "cov": cov,
    }
