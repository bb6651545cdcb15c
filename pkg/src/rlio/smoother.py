"""Fixed-lag sliding-window smoother.

Variables are the window's node states plus one gravity direction.  The
normal equations have block-tridiagonal node structure (IMU factors link
consecutive nodes only) with a dense border for gravity, so they are solved
with a banded Cholesky factorization and a 2x2 Schur complement.  A dense
solver is kept for cross-checking.
"""
from __future__ import annotations

import bisect
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cho_solve_banded, cholesky_banded

from .factors import (GRAVITY, Extrinsics, GravityVar, LidarPoseMeasurement, NavState,
                      PriorFactor, RadarScan, huber_loss, huber_weight, imu_batch,
                      imu_sqrt_info, lidar_batch, lidar_sqrt_info, prior_batch, radar_rows,
                      radar_velocity_batch, stack_pims)
from .manifold import Pose3, Rot3, s2_basis, s2_oplus, so3_exp
from .preintegration import (ImuBias, ImuBuffer, ImuNoiseParams, ImuSample, PreintegratedImu,
                             predict_at, predict_position)

log = logging.getLogger(__name__)

ND = 15  # node tangent dimension
NS = 1_000_000_000


class NodePolicy(str, Enum):
    PROPOSED_LIDAR_ONLY = "proposed"
    BASELINE_PER_MEASUREMENT = "baseline"
    LIDAR_INERTIAL_ONLY = "lio"


class OrderingError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerSettings:
    max_iterations: int = 10
    rel_tol: float = 1e-3
    initial_lambda: float = 1e-5
    lambda_down: float = 0.1
    lambda_up: float = 10.0
    # costs below this are treated as converged (a fixed point at ground truth)
    abs_tol: float = 1e-12

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 < self.rel_tol < 1.0:
            raise ValueError("rel_tol must lie in (0, 1)")
        for name in ("initial_lambda", "lambda_down", "lambda_up"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PriorSigmas:
    """Standard deviations of the bootstrap prior on the first node and gravity."""

    rotation: float = 1e-3
    position: float = 1e-3
    velocity: float = 1e-2
    accel_bias: float = 0.1
    gyro_bias: float = 0.01
    gravity: float = 0.01


@dataclass
class SolveReport:
    t: int
    iterations: int
    initial_cost: float
    final_cost: float
    wall_ns: int
    iter_ns: list = field(default_factory=list)
    nodes: int = 0
    converged: bool = True


@dataclass
class FactorWindow:
    """Read-only snapshot of the window contents."""

    nodes: dict
    gravity: GravityVar
    n_lidar: int
    n_imu: int
    n_radar: int
    prior: PriorFactor | None
    lag: float

    @property
    def span(self) -> float:
        ts = list(self.nodes)
        return (ts[-1] - ts[0]) / NS if ts else 0.0


@dataclass
class _Lidar:
    meas: LidarPoseMeasurement
    Rt: np.ndarray
    pt: np.ndarray
    W: np.ndarray


@dataclass
class _Radar:
    scan: RadarScan
    node_t: int | None = None
    pim: PreintegratedImu | None = None


@dataclass
class _Lin:
    cost: float
    D: np.ndarray  # (N,15,15) diagonal blocks
    O: np.ndarray  # (N-1,15,15) block (k+1, k)
    Gn: np.ndarray  # (N,15,2) node-gravity coupling
    Ggg: np.ndarray  # (2,2)
    gn: np.ndarray  # (N,15) gradient
    gg: np.ndarray  # (2,)


# --------------------------------------------------------------------------
# Linear algebra helpers
# --------------------------------------------------------------------------

def schur_marginalize(H: np.ndarray, b: np.ndarray, marg, keep):
    """Marginal information and gradient of ``keep`` after eliminating ``marg``.

    For the quadratic ``0.5 x^T H x + b^T x`` this returns ``(H', b')`` with
    ``H' = H_kk - H_km H_mm^-1 H_mk`` and ``b' = b_k - H_km H_mm^-1 b_m``.
    """
    marg = np.asarray(marg)
    keep = np.asarray(keep)
    Hmm = H[np.ix_(marg, marg)]
    Hkm = H[np.ix_(keep, marg)]
    try:
        c = cho_factor(Hmm)
        X = cho_solve(c, np.column_stack([Hkm.T, b[marg]]))
    except np.linalg.LinAlgError:
        X = np.linalg.pinv(Hmm) @ np.column_stack([Hkm.T, b[marg]])
    Hp = H[np.ix_(keep, keep)] - Hkm @ X[:, :-1]
    bp = b[keep] - Hkm @ X[:, -1]
    return 0.5 * (Hp + Hp.T), bp


def floor_eigenvalues(H: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    if lam[0] < floor:
        log.warning("marginal information not positive definite (min eig %.3g); flooring", lam[0])
        lam = np.maximum(lam, floor)
        return (V * lam) @ V.T
    return 0.5 * (H + H.T)


_BAND_CACHE: dict[int, tuple] = {}


def _band_index(n: int):
    """Flat indices into lower banded storage for the D and O blocks of ``n`` nodes."""
    hit = _BAND_CACHE.get(n)
    if hit is not None:
        return hit
    cols = ND * n
    i, j = np.meshgrid(np.arange(ND), np.arange(ND), indexing="ij")
    k = np.arange(n)[:, None, None]
    # D blocks: lower triangle only
    lo = (i >= j)
    d_rows = np.broadcast_to(i - j, (n, ND, ND))[:, lo]
    d_cols = (ND * k + j)[:, lo]
    d_sel = np.broadcast_to(lo, (n, ND, ND))
    k1 = np.arange(max(n - 1, 0))[:, None, None]
    o_rows = np.broadcast_to(ND + i - j, (max(n - 1, 0), ND, ND))
    o_cols = ND * k1 + j
    d_flat = (d_rows * cols + d_cols).ravel()
    o_flat = (o_rows * cols + o_cols).ravel()
    _BAND_CACHE[n] = (d_sel, d_flat, o_flat)
    return _BAND_CACHE[n]


def solve_arrowhead(lin: _Lin, lam: float, dense: bool = False):
    """Solve the LM-damped normal equations; returns ``(dn (N,15), dg (2,))`` or None."""
    n = len(lin.D)
    D = lin.D.copy()
    idx = np.arange(ND)
    # additive damping: scaling by diag(H) stalls on the stiff IMU chain
    D[:, idx, idx] += lam
    Ggg = lin.Ggg.copy()
    Ggg[[0, 1], [0, 1]] += lam
    if dense:
        m = ND * n
        H = np.zeros((m + 2, m + 2))
        for k in range(n):
            H[ND * k:ND * k + ND, ND * k:ND * k + ND] = D[k]
        for k in range(n - 1):
            H[ND * k + ND:ND * k + 2 * ND, ND * k:ND * k + ND] = lin.O[k]
            H[ND * k:ND * k + ND, ND * k + ND:ND * k + 2 * ND] = lin.O[k].T
        H[:m, m:] = lin.Gn.reshape(m, 2)
        H[m:, :m] = lin.Gn.reshape(m, 2).T
        H[m:, m:] = Ggg
        rhs = -np.concatenate([lin.gn.ravel(), lin.gg])
        try:
            x = cho_solve(cho_factor(H), rhs)
        except np.linalg.LinAlgError:
            return None
        return x[:m].reshape(n, ND), x[m:]
    cols = ND * n
    d_sel, d_flat, o_flat = _band_index(n)
    ab = np.zeros((2 * ND, cols))
    flat = ab.reshape(-1)
    flat[d_flat] = D[d_sel].ravel()
    if n > 1:
        flat[o_flat] = lin.O.ravel()
    try:
        cb = cholesky_banded(ab, lower=True)
    except np.linalg.LinAlgError:
        return None
    rhs = np.column_stack([lin.gn.ravel(), lin.Gn.reshape(cols, 2)])
    X = cho_solve_banded((cb, True), rhs)
    Ainv_g = X[:, 0]
    Ainv_G = X[:, 1:]
    G = lin.Gn.reshape(cols, 2)
    S = Ggg - G.T @ Ainv_G
    rg = -lin.gg + G.T @ Ainv_g
    try:
        dg = np.linalg.solve(S, rg)
    except np.linalg.LinAlgError:
        return None
    if not (np.all(np.isfinite(dg)) and S[0, 0] > 0 and np.linalg.det(S) > 0):
        return None
    dn = -Ainv_g - Ainv_G @ dg
    return dn.reshape(n, ND), dg


def model_decrease(lin: _Lin, dn: np.ndarray, dg: np.ndarray) -> float:
    """Cost decrease predicted by the undamped quadratic model for a step."""
    hHh = (np.einsum("ki,kij,kj->", dn, lin.D, dn)
           + 2.0 * np.einsum("ki,kij,kj->", dn[1:], lin.O, dn[:-1])
           + 2.0 * np.einsum("ki,kij,j->", dn, lin.Gn, dg) + dg @ lin.Ggg @ dg)
    return float(-(np.sum(lin.gn * dn) + lin.gg @ dg) - 0.5 * hHh)


# --------------------------------------------------------------------------
# Smoother
# --------------------------------------------------------------------------

class Smoother:
    """Sliding-window estimator with a selectable node-creation policy.

    Feed IMU samples with :meth:`add_imu` (before any measurement with a later
    or equal timestamp), then LiDAR and radar measurements in time order.
    """

    def __init__(self, policy: NodePolicy | str, extrinsics: Extrinsics,
                 noise: ImuNoiseParams, lag: float = 2.5, sigma_r: float = 0.15,
                 settings: OptimizerSettings | None = None,
                 prior_sigmas: PriorSigmas | None = None,
                 gravity_magnitude: float = GRAVITY, bootstrap_s: float = 0.5,
                 dense: bool = False):
        self.policy = NodePolicy(policy)
        self.ext = extrinsics
        if min(noise.accel_noise_density, noise.gyro_noise_density,
               noise.accel_bias_rw, noise.gyro_bias_rw) <= 0:
            raise ValueError("smoother needs strictly positive IMU noise densities")
        if not lag > 0:
            raise ValueError("lag must be positive")
        if not sigma_r > 0:
            raise ValueError("sigma_r must be positive")
        self.noise = noise
        self.lag_ns = int(round(lag * NS))
        self.sigma_r = float(sigma_r)
        self.settings = settings or OptimizerSettings()
        self.prior_sigmas = prior_sigmas or PriorSigmas()
        self.gmag = float(gravity_magnitude)
        self.bootstrap_ns = int(round(bootstrap_s * NS))
        self.dense = dense

        self.imu = ImuBuffer()
        self._T_LI = extrinsics.T_LI
        self._t: list[int] = []
        self._R = np.zeros((0, 3, 3))
        self._p = np.zeros((0, 3))
        self._v = np.zeros((0, 3))
        self._ba = np.zeros((0, 3))
        self._bg = np.zeros((0, 3))
        self._g = np.array([0.0, 0.0, -1.0])
        self._lidar: list[_Lidar | None] = []
        self._node_radar: list[RadarScan | None] = []  # baseline radar nodes
        self._imu_pims: list[PreintegratedImu] = []  # factor k joins nodes k, k+1
        self._imu_W: list[np.ndarray] = []
        self._imu_stack: dict | None = None
        self._radar: list[_Radar] = []  # proposed policy, kept time-sorted
        self.prior: PriorFactor | None = None
        self._initial: NavState | None = None
        self._out: tuple | None = None

        self.reports: list[SolveReport] = []
        self.dropped_radar = 0
        self.skipped_lidar = 0
        self.failed = False

    # ------------------------------------------------------------------ state
    @property
    def num_nodes(self) -> int:
        return len(self._t)

    @property
    def node_times(self) -> list[int]:
        return list(self._t)

    @property
    def gravity(self) -> GravityVar:
        return GravityVar(self._g.copy(), self.gmag)

    def state(self, k: int) -> NavState:
        return NavState(Pose3(Rot3(self._R[k]), self._p[k]), self._v[k].copy(),
                        ImuBias(self._ba[k].copy(), self._bg[k].copy()))

    def window(self) -> FactorWindow:
        nodes = {t: self.state(k) for k, t in enumerate(self._t)}
        n_radar = (sum(r is not None for r in self._node_radar)
                   + sum(r.node_t is not None for r in self._radar))
        return FactorWindow(nodes, self.gravity, sum(m is not None for m in self._lidar),
                            len(self._imu_pims), n_radar, self.prior, self.lag_ns / NS)

    def set_initial_state(self, state: NavState) -> None:
        """Anchor the first node (pose, velocity, bias mean) instead of using LiDAR."""
        self._initial = state

    # ------------------------------------------------------------------ input
    def add_imu(self, sample: ImuSample) -> None:
        self.imu.add(sample)

    def add_lidar(self, m: LidarPoseMeasurement) -> SolveReport | None:
        if self._t and m.t <= self._t[-1]:
            raise OrderingError(f"LiDAR measurement at {m.t} is not newer than newest node {self._t[-1]}")
        target = m.pose * self._T_LI
        entry = _Lidar(m, target.R.copy(), target.t.copy(), lidar_sqrt_info(m, self.ext))
        if not self._t:
            if not self._bootstrap(m.t, target):
                self.skipped_lidar += 1
                return None
            self._lidar[0] = entry
        else:
            self._append_node(m.t, lidar=entry)
        return self._update(m.t)

    def add_radar(self, scan: RadarScan) -> SolveReport | None:
        if self.policy is NodePolicy.LIDAR_INERTIAL_ONLY:
            return None
        if not self._t or scan.t < self._t[0] or len(scan) == 0:
            self.dropped_radar += 1
            return None
        if self.policy is NodePolicy.PROPOSED_LIDAR_ONLY:
            ts = [r.scan.t for r in self._radar]
            self._radar.insert(bisect.bisect_right(ts, scan.t), _Radar(scan))
            self._attach_radar()
            return None
        if scan.t <= self._t[-1]:
            k = bisect.bisect_left(self._t, scan.t)
            if self._t[k] == scan.t:
                if self._node_radar[k] is not None:
                    self.dropped_radar += 1
                    return None
                self._node_radar[k] = scan
            else:
                self._insert_node(k, scan)
            return self._update(scan.t)
        self._append_node(scan.t, radar=scan)
        return self._update(scan.t)

    # ------------------------------------------------------------------ graph edits
    def _bootstrap(self, t: int, target: Pose3) -> bool:
        if not len(self.imu) or t < self.imu.times[0] + self.bootstrap_ns:
            return False
        t0 = self.imu.times[0]
        acc = np.array([self.imu.sample(k).accel for k, ts in enumerate(self.imu.times)
                        if ts <= t0 + self.bootstrap_ns])
        if self._initial is not None:
            x0 = self._initial
        else:
            x0 = NavState(target, np.zeros(3), ImuBias())
        f = x0.pose.R @ acc.mean(axis=0)
        self._g = -f / np.linalg.norm(f)
        self._t = [t]
        self._R = x0.pose.R[None].copy()
        self._p = x0.pose.t[None].copy()
        self._v = x0.velocity[None].copy()
        self._ba = x0.bias.accel[None].copy()
        self._bg = x0.bias.gyro[None].copy()
        self._lidar = [None]
        self._node_radar = [None]
        s = self.prior_sigmas
        sig = np.concatenate([[s.rotation] * 3, [s.position] * 3, [s.velocity] * 3,
                              [s.accel_bias] * 3, [s.gyro_bias] * 3, [s.gravity] * 2])
        self.prior = PriorFactor(x0.pose, x0.velocity, x0.bias, self._g.copy(),
                                 np.diag(1.0 / sig ** 2))
        return True

    def _append_node(self, t: int, lidar: _Lidar | None = None,
                     radar: RadarScan | None = None) -> None:
        k = len(self._t) - 1
        bias = ImuBias(self._ba[k].copy(), self._bg[k].copy())
        pim = self.imu.preintegrate(self._t[k], t, bias, self.noise)
        xk = self.state(k)
        gvec = self.gmag * self._g
        R, v = predict_at(pim, xk, gvec)
        p = predict_position(pim, xk, gvec)
        self._t.append(t)
        self._R = np.concatenate([self._R, R[None]])
        self._p = np.concatenate([self._p, p[None]])
        self._v = np.concatenate([self._v, v[None]])
        self._ba = np.concatenate([self._ba, self._ba[-1:]])
        self._bg = np.concatenate([self._bg, self._bg[-1:]])
        self._lidar.append(lidar)
        self._node_radar.append(radar)
        self._imu_pims.append(pim)
        self._imu_W.append(imu_sqrt_info(pim, self.noise))
        if self._imu_stack is not None:
            P = stack_pims([pim])
            P["W"] = self._imu_W[-1][None]
            self._imu_stack = {key: np.concatenate([val, P[key]])
                               for key, val in self._imu_stack.items()}

    def _insert_node(self, k: int, scan: RadarScan) -> None:
        """Split the IMU factor between nodes ``k-1`` and ``k`` with a radar node."""
        t = scan.t
        i = k - 1
        xi = self.state(i)
        pim_a = self.imu.preintegrate(self._t[i], t, xi.bias, self.noise)
        gvec = self.gmag * self._g
        R, v = predict_at(pim_a, xi, gvec)
        p = predict_position(pim_a, xi, gvec)
        pim_b = self.imu.preintegrate(t, self._t[k], xi.bias, self.noise)
        self._t.insert(k, t)
        self._R = np.insert(self._R, k, R, axis=0)
        self._p = np.insert(self._p, k, p, axis=0)
        self._v = np.insert(self._v, k, v, axis=0)
        self._ba = np.insert(self._ba, k, xi.bias.accel, axis=0)
        self._bg = np.insert(self._bg, k, xi.bias.gyro, axis=0)
        self._lidar.insert(k, None)
        self._node_radar.insert(k, scan)
        self._imu_pims[i:i + 1] = [pim_a, pim_b]
        self._imu_W[i:i + 1] = [imu_sqrt_info(pim_a, self.noise), imu_sqrt_info(pim_b, self.noise)]
        self._imu_stack = None

    def _update(self, t: int) -> SolveReport:
        while len(self._t) > 1 and self._t[-1] - self._t[0] >= self.lag_ns:
            self.marginalize_oldest()
        if self.policy is NodePolicy.PROPOSED_LIDAR_ONLY:
            self._attach_radar()  # factor construction stays outside the timed solve
        report = self.optimize(t)
        self._out = None
        if not report.final_cost <= 1e12 or not self._finite():
            self.failed = True
        return report

    def _finite(self) -> bool:
        return bool(np.all(np.isfinite(self._R)) and np.all(np.isfinite(self._p))
                    and np.all(np.isfinite(self._v)) and np.all(np.isfinite(self._ba))
                    and np.all(np.isfinite(self._bg)) and np.all(np.isfinite(self._g)))

    # ------------------------------------------------------------------ radar attachment
    def _attach_radar(self) -> list[_Radar]:
        """Attach buffered scans to the newest node at or before their time."""
        live = []
        keep = []
        for r in self._radar:
            k = bisect.bisect_right(self._t, r.scan.t) - 1
            if k < 0:
                self.dropped_radar += 1
                continue
            keep.append(r)
            t_node = self._t[k]
            if r.node_t != t_node or r.pim is None:
                if self.imu.times[-1] < r.scan.t and r.scan.t > t_node:
                    # IMU not yet available up to the scan: wait
                    r.node_t, r.pim = None, None
                    continue
                bias = ImuBias(self._ba[k].copy(), self._bg[k].copy())
                r.pim = self.imu.preintegrate(t_node, r.scan.t, bias, self.noise)
                r.node_t = t_node
            live.append(r)
        self._radar = keep
        return live

    # ------------------------------------------------------------------ linearization
    def _values(self):
        return (self._R, self._p, self._v, self._ba, self._bg, self._g)

    def _imu_data(self):
        if self._imu_stack is None and self._imu_pims:
            P = stack_pims(self._imu_pims)
            P["W"] = np.stack(self._imu_W)
            self._imu_stack = P
        return self._imu_stack

    def _radar_data(self, live: list[_Radar]):
        if not live:
            return None
        node_idx = np.array([bisect.bisect_left(self._t, r.node_t) for r in live])
        counts = np.array([len(r.scan) for r in live])
        return {
            "node": node_idx,
            "sid": np.repeat(np.arange(len(live)), counts),
            "starts": np.r_[0, np.cumsum(counts)[:-1]],
            "bearings": np.concatenate([r.scan.bearings for r in live]),
            "speeds": np.concatenate([r.scan.speeds for r in live]),
            "gyro": np.stack([r.scan.gyro for r in live]),
            "P": stack_pims([r.pim for r in live]),
        }

    def _baseline_radar_data(self):
        idx = [k for k, s in enumerate(self._node_radar) if s is not None]
        if not idx:
            return None
        scans = [self._node_radar[k] for k in idx]
        counts = np.array([len(s) for s in scans])
        node_idx = np.array(idx)
        return {
            "node": node_idx,
            "sid": np.repeat(np.arange(len(scans)), counts),
            "starts": np.r_[0, np.cumsum(counts)[:-1]],
            "bearings": np.concatenate([s.bearings for s in scans]),
            "speeds": np.concatenate([s.speeds for s in scans]),
            "gyro": np.stack([s.gyro for s in scans]),
            "P": None,
        }

    def _problem(self):
        lid = [k for k, m in enumerate(self._lidar) if m is not None]
        lidar = None
        if lid:
            lidar = {"node": np.array(lid),
                     "Rt": np.stack([self._lidar[k].Rt for k in lid]),
                     "pt": np.stack([self._lidar[k].pt for k in lid]),
                     "W": np.stack([self._lidar[k].W for k in lid])}
        if self.policy is NodePolicy.PROPOSED_LIDAR_ONLY:
            radar = self._radar_data(self._attach_radar())
        elif self.policy is NodePolicy.BASELINE_PER_MEASUREMENT:
            radar = self._baseline_radar_data()
        else:
            radar = None
        return {"lidar": lidar, "imu": self._imu_data(), "radar": radar}

    def _linearize(self, X, prob, need_jac: bool = True) -> _Lin | float:
        R, p, v, ba, bg, gdir = X
        n = len(R)
        cost = 0.0
        if need_jac:
            D = np.zeros((n, ND, ND))
            O = np.zeros((max(n - 1, 0), ND, ND))
            Gn = np.zeros((n, ND, 2))
            Ggg = np.zeros((2, 2))
            gn = np.zeros((n, ND))
            gg = np.zeros(2)

        if self.prior is not None:
            e, Jn, Jg = prior_batch(R[0], p[0], v[0], np.concatenate([ba[0], bg[0]]), gdir,
                                    self.prior)
            W = self.prior.sqrt_info
            r = W @ e
            cost += 0.5 * float(r @ r)
            if need_jac:
                A, B = W @ Jn, W @ Jg
                D[0] += A.T @ A
                Gn[0] += A.T @ B
                Ggg += B.T @ B
                gn[0] += A.T @ r
                gg += B.T @ r

        L = prob["lidar"]
        if L is not None:
            idx = L["node"]
            e, J = lidar_batch(R[idx], p[idx], L["Rt"], L["pt"], need_jac)
            r = np.einsum("kij,kj->ki", L["W"], e)
            cost += 0.5 * float(np.sum(r * r))
            if need_jac:
                A = L["W"] @ J
                D[idx, :6, :6] += np.einsum("kji,kjl->kil", A, A)
                gn[idx, :6] += np.einsum("kji,kj->ki", A, r)

        P = prob["imu"]
        if P is not None and n > 1:
            xi = (R[:-1], p[:-1], v[:-1], ba[:-1], bg[:-1])
            xj = (R[1:], p[1:], v[1:], ba[1:], bg[1:])
            e, Ji, Jj, Jg = imu_batch(xi, xj, gdir, self.gmag, P, need_jac)
            W = P["W"]
            r = np.einsum("kij,kj->ki", W, e)
            cost += 0.5 * float(np.sum(r * r))
            if need_jac:
                A, B, C = W @ Ji, W @ Jj, W @ Jg
                At, Bt = np.swapaxes(A, 1, 2), np.swapaxes(B, 1, 2)
                D[:-1] += At @ A
                D[1:] += Bt @ B
                O += Bt @ A
                Gn[:-1] += At @ C
                Gn[1:] += Bt @ C
                Ggg += np.einsum("kji,kjl->il", C, C)
                gn[:-1] += np.einsum("kji,kj->ki", A, r)
                gn[1:] += np.einsum("kji,kj->ki", B, r)
                gg += np.einsum("kji,kj->i", C, r)

        Q = prob["radar"]
        if Q is not None:
            idx = Q["node"]
            vR, Jn, Jg, cov = radar_velocity_batch(R[idx], v[idx], ba[idx], bg[idx], Q["gyro"],
                                                   gdir, self.gmag, self.ext.R_RI,
                                                   self.ext.p_IR, Q["P"], need_jac)
            # rows of one scan share the 3x15 velocity Jacobian, so the
            # information folds into a 3x3 bearing moment per scan
            e, _, _, sig = radar_rows(vR, None, None, cov, Q["sid"], Q["bearings"], Q["speeds"],
                                      self.sigma_r)
            rw = e / sig
            cost += float(np.sum(huber_loss(rw)))
            if need_jac:
                sw = np.sqrt(huber_weight(rw))
                s = sw / sig
                mu = Q["bearings"]
                starts = Q["starts"]
                Ms = np.add.reduceat((s * s)[:, None, None] * (mu[:, :, None] * mu[:, None, :]),
                                     starts, axis=0)
                ms = -np.add.reduceat((s * rw * sw)[:, None] * mu, starts, axis=0)
                JnT = np.swapaxes(Jn, 1, 2)
                MJ = Ms @ Jn
                np.add.at(D, idx, JnT @ MJ)
                np.add.at(gn, idx, np.einsum("kij,kj->ki", JnT, ms))
                if Q["P"] is not None:
                    JgT = np.swapaxes(Jg, 1, 2)
                    np.add.at(Gn, idx, JnT @ (Ms @ Jg))
                    Ggg += np.sum(JgT @ (Ms @ Jg), axis=0)
                    gg += np.einsum("kij,kj->i", JgT, ms)
        if not need_jac:
            return cost
        return _Lin(cost, D, O, Gn, Ggg, gn, gg)

    @staticmethod
    def _retract(X, dn, dg):
        R, p, v, ba, bg, gdir = X
        return (R @ so3_exp(dn[:, 0:3]),
                p + np.einsum("kij,kj->ki", R, dn[:, 3:6]),
                v + dn[:, 6:9], ba + dn[:, 9:12], bg + dn[:, 12:15],
                s2_oplus(gdir, dg))

    # ------------------------------------------------------------------ optimization
    def cost(self) -> float:
        return self._linearize(self._values(), self._problem(), need_jac=False)

    def optimize(self, t: int | None = None) -> SolveReport:
        """Levenberg-Marquardt over all window variables."""
        st = self.settings
        start = time.perf_counter_ns()
        prob = self._problem()
        X = self._values()
        lin = self._linearize(X, prob)
        initial = lin.cost
        lam = st.initial_lambda
        iters = 0
        iter_ns = []
        converged = False
        if not math.isfinite(initial):
            log.error("non-finite cost at window start (t=%s)", t)
            return self._report(t, 0, initial, initial, start, iter_ns, False)
        while iters < st.max_iterations:
            if lin.cost <= st.abs_tol:
                converged = True
                break
            t_it = time.perf_counter_ns()
            iters += 1
            step = solve_arrowhead(lin, lam, self.dense)
            if step is None:
                lam *= st.lambda_up
                iter_ns.append(time.perf_counter_ns() - t_it)
                continue
            Xn = self._retract(X, *step)
            new_cost = self._linearize(Xn, prob, need_jac=False)
            if math.isfinite(new_cost) and new_cost < lin.cost:
                rel = (lin.cost - new_cost) / lin.cost
                X = Xn
                lam = max(lam * st.lambda_down, 1e-12)
                if rel <= st.rel_tol or iters >= st.max_iterations:
                    lin.cost = new_cost
                    iter_ns.append(time.perf_counter_ns() - t_it)
                    converged = rel <= st.rel_tol
                    break
                # Jacobians only when another iteration follows
                lin = self._linearize(X, prob)
                iter_ns.append(time.perf_counter_ns() - t_it)
            else:
                lam *= st.lambda_up
                iter_ns.append(time.perf_counter_ns() - t_it)
                # nothing left to gain: even the quadratic model predicts less
                # than the termination threshold
                if model_decrease(lin, *step) <= st.rel_tol * lin.cost or lam > 1e12:
                    converged = True
                    break
        self._R, self._p, self._v, self._ba, self._bg, self._g = X
        return self._report(t, iters, initial, lin.cost, start, iter_ns, converged)

    def _report(self, t, iters, c0, c1, start, iter_ns, converged) -> SolveReport:
        rep = SolveReport(t if t is not None else (self._t[-1] if self._t else 0), iters,
                          c0, c1, time.perf_counter_ns() - start, iter_ns, len(self._t),
                          converged)
        self.reports.append(rep)
        return rep

    # ------------------------------------------------------------------ marginalization
    def _marginal_system(self):
        """Information and gradient over (node0, node1, gravity) from node 0's factors."""
        m = 2 * ND + 2
        R, p, v, ba, bg, gdir = self._values()
        rows, cols = [], []  # whitened residuals and their (k, 32) Jacobians

        def add(r, blocks):
            J = np.zeros((len(r), m))
            for sl, Jb in blocks:
                J[:, sl] = Jb
            rows.append(r)
            cols.append(J)

        gsl = slice(2 * ND, m)
        if self.prior is not None:
            e, Jn, Jg = prior_batch(R[0], p[0], v[0], np.concatenate([ba[0], bg[0]]), gdir,
                                    self.prior)
            W = self.prior.sqrt_info
            add(W @ e, [(slice(0, ND), W @ Jn), (gsl, W @ Jg)])
        lid = self._lidar[0]
        if lid is not None:
            e, J = lidar_batch(R[:1], p[:1], lid.Rt[None], lid.pt[None])
            add(lid.W @ e[0], [(slice(0, 6), lid.W @ J[0])])
        radar_scans, P = [], None
        if self.policy is NodePolicy.PROPOSED_LIDAR_ONLY:
            live = [r for r in self._attach_radar() if r.node_t == self._t[0]]
            radar_scans = [r.scan for r in live]
            P = stack_pims([r.pim for r in live]) if live else None
        elif self._node_radar[0] is not None:
            radar_scans = [self._node_radar[0]]
        if radar_scans:
            counts = np.array([len(s) for s in radar_scans])
            sid = np.repeat(np.arange(len(radar_scans)), counts)
            k = len(radar_scans)
            idx = np.zeros(k, dtype=int)
            vR, Jn, Jg, cov = radar_velocity_batch(
                R[idx], v[idx], ba[idx], bg[idx], np.stack([s.gyro for s in radar_scans]),
                gdir, self.gmag, self.ext.R_RI, self.ext.p_IR, P)
            e, Jr, Jgr, sig = radar_rows(vR, Jn, Jg, cov, sid,
                                         np.concatenate([s.bearings for s in radar_scans]),
                                         np.concatenate([s.speeds for s in radar_scans]),
                                         self.sigma_r)
            rw = e / sig
            w = np.sqrt(huber_weight(rw))
            s = w / sig
            add(rw * w, [(slice(0, ND), Jr * s[:, None]), (gsl, Jgr * s[:, None])])
        if len(self._t) > 1:
            P1 = stack_pims(self._imu_pims[:1])
            e, Ji, Jj, Jg = imu_batch((R[:1], p[:1], v[:1], ba[:1], bg[:1]),
                                      (R[1:2], p[1:2], v[1:2], ba[1:2], bg[1:2]),
                                      gdir, self.gmag, P1)
            W = self._imu_W[0]
            add(W @ e[0], [(slice(0, ND), W @ Ji[0]), (slice(ND, 2 * ND), W @ Jj[0]),
                           (gsl, W @ Jg[0])])
        J = np.concatenate(cols)
        return J.T @ J, J.T @ np.concatenate(rows)

    def marginalize_oldest(self) -> None:
        """Fold node 0 and its factors into a new prior on node 1 and gravity."""
        if len(self._t) < 2:
            raise ValueError("need at least two nodes to marginalize")
        H, b = self._marginal_system()
        Hp, bp = schur_marginalize(H, b, np.arange(ND), np.arange(ND, 2 * ND + 2))
        Hp = floor_eigenvalues(Hp)
        delta = -np.linalg.solve(Hp, bp)
        x1 = self.state(1).retract(delta[:ND])
        g_lin = self._g
        g_p = s2_oplus(g_lin, delta[ND:])
        # express the gravity block in the tangent basis at the new prior point
        T = np.eye(ND + 2)
        T[ND:, ND:] = s2_basis(g_lin).T @ s2_basis(g_p)
        Hp = T.T @ Hp @ T
        S = np.ones(ND + 2)
        S[6:] = -1.0
        info = floor_eigenvalues(Hp * np.outer(S, S))
        self.prior = PriorFactor(x1.pose, x1.velocity, x1.bias, g_p, info)

        self._t.pop(0)
        self._R, self._p, self._v = self._R[1:], self._p[1:], self._v[1:]
        self._ba, self._bg = self._ba[1:], self._bg[1:]
        self._lidar.pop(0)
        self._node_radar.pop(0)
        self._imu_pims.pop(0)
        self._imu_W.pop(0)
        if self._imu_stack is not None:
            self._imu_stack = ({key: val[1:] for key, val in self._imu_stack.items()}
                               if self._imu_pims else None)
        if self._radar:
            self._radar = [r for r in self._radar if r.scan.t >= self._t[0]]
        self.imu.prune_before(self._t[0])

    # ------------------------------------------------------------------ output
    def propagate_output(self, t_query: int) -> NavState:
        """Newest optimized state propagated through buffered IMU samples to ``t_query``."""
        if not self._t:
            raise ValueError("no nodes yet")
        k = len(self._t) - 1
        t_node = self._t[k]
        if t_query < t_node:
            raise ValueError("query time precedes the newest node")
        if self._out is None or self._out[0] != t_node or self._out[1] > t_query:
            bias = ImuBias(self._ba[k].copy(), self._bg[k].copy())
            self._out = [t_node, t_node, PreintegratedImu(bias_lin=bias, noise=self.noise,
                                                            track_jacobians=False)]
        pim = self._out[2]
        if t_query > self._out[1]:
            self.imu.extend(pim, self._out[1], t_query)
            self._out[1] = t_query
        # the pim was integrated with the node's bias, so no bias correction
        Ri, vi, T = self._R[k], self._v[k], pim.dt
        g = self.gmag * self._g
        R = Ri @ pim.dR
        v = vi + g * T + Ri @ pim.dv
        p = self._p[k] + vi * T + 0.5 * g * T * T + Ri @ pim.dp
        return NavState(Pose3(Rot3(R), p), v, pim.bias_lin)
