"""Residuals, Jacobians and whitening for the window's factor types.

Node tangent ordering (15): ``(dtheta, dp, dv, dba, dbg)`` with retraction
``R <- R Exp(dtheta)``, ``p <- p + R dp``, ``v <- v + dv``, biases additive.
Gravity is a unit direction on S^2 with a 2-dim tangent; the world gravity
vector is ``magnitude * direction``.

Every factor is available in two forms: a batched kernel over stacked arrays
(used by the smoother) and a single-factor function returning a
:class:`FactorResult`.  Jacobians are of the *raw* residual; whitening is a
separate, state-independent matrix (or per-row scale for radar).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import (Pose3, Rot3, cross, s2_basis, s2_ominus, s2_ominus_jacobian, s2_oplus,
                       se3_adjoint, se3_log, se3_right_jacobian_inv, skew, so3_exp, so3_log,
                       so3_right_jacobian, so3_right_jacobian_inv)
from .preintegration import ImuBias, ImuNoiseParams, PreintegratedImu, bias_correct

HUBER_DELTA = 1.345
GRAVITY = 9.81
NODE_DIM = 15
GRAVITY_DIM = 2


# --------------------------------------------------------------------------
# Variables and measurements
# --------------------------------------------------------------------------

@dataclass
class NavState:
    pose: Pose3 = field(default_factory=Pose3)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias: ImuBias = field(default_factory=ImuBias)

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)

    def retract(self, d) -> "NavState":
        d = np.asarray(d, dtype=float)
        R = self.pose.R
        pose = Pose3(Rot3(R @ so3_exp(d[0:3])), self.pose.t + R @ d[3:6])
        bias = ImuBias(self.bias.accel + d[9:12], self.bias.gyro + d[12:15])
        return NavState(pose, self.velocity + d[6:9], bias)


@dataclass
class GravityVar:
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    magnitude: float = GRAVITY

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if not (np.isfinite(n) and n > 0):
            raise ValueError("gravity direction must be a finite nonzero vector")
        if not self.magnitude > 0:
            raise ValueError("gravity magnitude must be positive")
        self.direction = d / n

    @property
    def vector(self) -> np.ndarray:
        return self.magnitude * self.direction

    def retract(self, d) -> "GravityVar":
        return GravityVar(s2_oplus(self.direction, d), self.magnitude)


@dataclass(frozen=True)
class Extrinsics:
    T_IL: Pose3 = field(default_factory=Pose3)
    T_IR: Pose3 = field(default_factory=Pose3)

    @property
    def T_LI(self) -> Pose3:
        return self.T_IL.inverse()

    @property
    def R_RI(self) -> np.ndarray:
        return self.T_IR.R.T

    @property
    def p_IR(self) -> np.ndarray:
        return self.T_IR.t


@dataclass
class LidarPoseMeasurement:
    t: int
    pose: Pose3  # world-frame LiDAR pose
    cov: np.ndarray  # 6x6, (rotation, translation) tangent of the LiDAR frame

    def __post_init__(self):
        self.cov = np.asarray(self.cov, dtype=float).reshape(6, 6)


@dataclass
class RadarScan:
    t: int
    bearings: np.ndarray  # (N, 3) unit vectors in the radar frame
    speeds: np.ndarray  # (N,) radial speeds, m/s
    gyro: np.ndarray  # gyro reading at t

    def __post_init__(self):
        self.bearings = np.asarray(self.bearings, dtype=float).reshape(-1, 3)
        self.speeds = np.asarray(self.speeds, dtype=float).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(3)
        if len(self.bearings) != len(self.speeds):
            raise ValueError("bearings and speeds differ in length")

    def __len__(self) -> int:
        return len(self.speeds)


@dataclass
class PriorFactor:
    """Gaussian prior on (oldest node, gravity) with a 17x17 information matrix.

    Tangent ordering is the node ordering followed by the 2 gravity dims.
    """

    pose: Pose3
    velocity: np.ndarray
    bias: ImuBias
    gravity: np.ndarray
    information: np.ndarray

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        info = np.asarray(self.information, dtype=float).reshape(17, 17)
        info = 0.5 * (info + info.T)
        self.information = info
        # info = V diag(lam) V^T  ->  0.5 e^T info e = 0.5 |diag(sqrt lam) V^T e|^2
        lam, V = np.linalg.eigh(info)
        if not lam[0] > 0:
            raise ValueError("prior information must be positive definite")
        self.sqrt_info = (V * np.sqrt(lam)).T

    @classmethod
    def from_covariance(cls, pose, velocity, bias, gravity, cov) -> "PriorFactor":
        return cls(pose, velocity, bias, gravity, np.linalg.inv(cov))

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.information)


@dataclass
class FactorResult:
    """Residual with Jacobians keyed by variable name ("x_i", "x_j", "gravity").

    ``sqrt_info`` is a matrix, or a per-row vector for radar factors.
    ``weights`` are IRLS robust weights (ones for non-robust factors);
    ``whitened`` already includes their square root.
    """

    residual: np.ndarray
    jacobians: dict
    sqrt_info: np.ndarray
    weights: np.ndarray
    whitened: np.ndarray
    loss: float

    def whitened_jacobian(self, name: str) -> np.ndarray:
        J = self.jacobians[name]
        s = np.sqrt(self.weights)[:, None]
        if self.sqrt_info.ndim == 1:
            return s * (self.sqrt_info[:, None] * J)
        return s * (self.sqrt_info @ J)


def _result(e, jac, sqrt_info, robust: bool) -> FactorResult:
    r = sqrt_info * e if sqrt_info.ndim == 1 else sqrt_info @ e
    if robust:
        w = huber_weight(r)
        loss = float(np.sum(huber_loss(r)))
    else:
        w = np.ones_like(r)
        loss = 0.5 * float(r @ r)
    return FactorResult(e, jac, sqrt_info, w, np.sqrt(w) * r, loss)


# --------------------------------------------------------------------------
# Robust kernel
# --------------------------------------------------------------------------

def huber_weight(r, delta: float = HUBER_DELTA):
    """IRLS weight: 1 inside ``[-delta, delta]``, ``delta/|r|`` outside."""
    a = np.abs(np.asarray(r, dtype=float))
    return np.where(a <= delta, 1.0, delta / np.maximum(a, delta))


def huber_loss(r, delta: float = HUBER_DELTA):
    a = np.abs(np.asarray(r, dtype=float))
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


# --------------------------------------------------------------------------
# Whitening helpers
# --------------------------------------------------------------------------

def sqrt_information(cov: np.ndarray) -> np.ndarray:
    """``W`` with ``W^T W = cov^-1``; eigen-based so huge anisotropy is fine."""
    cov = 0.5 * (cov + cov.T)
    lam, V = np.linalg.eigh(cov)
    if lam[0] <= 0:
        raise ValueError("covariance is not positive definite")
    return (V / np.sqrt(lam)).T


def lidar_sqrt_info(m: LidarPoseMeasurement, ext: Extrinsics) -> np.ndarray:
    Ad = se3_adjoint(ext.T_IL.R, ext.T_IL.t)
    return sqrt_information(Ad @ m.cov @ Ad.T)


def imu_covariance(pim: PreintegratedImu, noise: ImuNoiseParams) -> np.ndarray:
    """15x15 covariance over (e_R, e_p, e_v, e_ba, e_bg)."""
    order = np.r_[0:3, 6:9, 3:6]
    cov = np.zeros((15, 15))
    cov[:9, :9] = pim.cov[np.ix_(order, order)]
    cov[9:12, 9:12] = np.eye(3) * noise.accel_bias_rw ** 2 * pim.dt
    cov[12:15, 12:15] = np.eye(3) * noise.gyro_bias_rw ** 2 * pim.dt
    return cov


def imu_sqrt_info(pim: PreintegratedImu, noise: ImuNoiseParams) -> np.ndarray:
    cov = imu_covariance(pim, noise)
    L = np.linalg.cholesky(0.5 * (cov + cov.T))
    return np.linalg.inv(L)


# --------------------------------------------------------------------------
# Batched kernels
# --------------------------------------------------------------------------

_I3 = np.eye(3)


def _T(a):
    return np.swapaxes(a, -1, -2)


def _mv(A, x):
    return np.einsum("...ij,...j->...i", A, x)


def lidar_batch(R, p, Rt, pt, jac: bool = True):
    """LiDAR errors for nodes ``(R, p)`` against targets ``T_t = T_WL T_LI``.

    Returns ``e (K,6)`` and the Jacobian w.r.t. the node pose ``(K,6,6)``.
    """
    RtT = _T(Rt)
    e = se3_log(RtT @ R, _mv(RtT, p - pt))
    return e, (se3_right_jacobian_inv(e) if jac else None)


def stack_pims(pims) -> dict:
    return {
        "dR": np.stack([q.dR for q in pims]),
        "dv": np.stack([q.dv for q in pims]),
        "dp": np.stack([q.dp for q in pims]),
        "dt": np.array([q.dt for q in pims]),
        "JR": np.stack([q.J_R_bg for q in pims]),
        "Jvba": np.stack([q.J_v_ba for q in pims]),
        "Jvbg": np.stack([q.J_v_bg for q in pims]),
        "Jpba": np.stack([q.J_p_ba for q in pims]),
        "Jpbg": np.stack([q.J_p_bg for q in pims]),
        "ba": np.stack([q.bias_lin.accel for q in pims]),
        "bg": np.stack([q.bias_lin.gyro for q in pims]),
        "cov_rv": np.stack([q.cov[:6, :6] for q in pims]),
    }


def _corrected(P, ba, bg):
    dba = ba - P["ba"]
    dbg = bg - P["bg"]
    phi = _mv(P["JR"], dbg)
    dR = P["dR"] @ so3_exp(phi)
    dv = P["dv"] + _mv(P["Jvba"], dba) + _mv(P["Jvbg"], dbg)
    dp = P["dp"] + _mv(P["Jpba"], dba) + _mv(P["Jpbg"], dbg)
    return phi, dR, dv, dp


def imu_batch(xi: tuple, xj: tuple, gdir, gmag, P: dict, jac: bool = True):
    """IMU errors between node tuples ``(R, p, v, ba, bg)`` (each stacked).

    Returns ``e (K,15)``, ``Ji (K,15,15)``, ``Jj (K,15,15)``, ``Jg (K,15,2)``;
    the Jacobians are None when ``jac`` is false.
    """
    Ri, pi, vi, bai, bgi = xi
    Rj, pj, vj, baj, bgj = xj
    K = len(Ri)
    phi, dR, dv, dp = _corrected(P, bai, bgi)
    T = P["dt"][:, None]
    g = gmag * gdir
    RiT = _T(Ri)
    RijT = RiT @ Rj
    eR = so3_log(_T(dR) @ RijT)
    pv = _mv(RiT, pj - pi - vi * T - 0.5 * g * T * T)
    vv = _mv(RiT, vj - vi - g * T)
    e = np.concatenate([eR, pv - dp, vv - dv, baj - bai, bgj - bgi], axis=1)
    if not jac:
        return e, None, None, None

    Jrinv = so3_right_jacobian_inv(eR)
    Ji = np.zeros((K, 15, 15))
    Jj = np.zeros((K, 15, 15))
    Ji[:, 0:3, 0:3] = -Jrinv @ _T(RijT)
    Ji[:, 0:3, 12:15] = -Jrinv @ _T(so3_exp(eR)) @ so3_right_jacobian(phi) @ P["JR"]
    Jj[:, 0:3, 0:3] = Jrinv
    Ji[:, 3:6, 0:3] = skew(pv)
    Ji[:, 3:6, 3:6] = -_I3
    Ji[:, 3:6, 6:9] = -RiT * T[:, :, None]
    Ji[:, 3:6, 9:12] = -P["Jpba"]
    Ji[:, 3:6, 12:15] = -P["Jpbg"]
    Jj[:, 3:6, 3:6] = RijT
    Ji[:, 6:9, 0:3] = skew(vv)
    Ji[:, 6:9, 6:9] = -RiT
    Ji[:, 6:9, 9:12] = -P["Jvba"]
    Ji[:, 6:9, 12:15] = -P["Jvbg"]
    Jj[:, 6:9, 6:9] = RiT
    idx = np.arange(9, 15)
    Ji[:, idx, idx] = -1.0
    Jj[:, idx, idx] = 1.0
    RB = RiT @ s2_basis(gdir) * gmag
    Jg = np.zeros((K, 15, 2))
    Jg[:, 3:6] = -RB * (0.5 * T * T)[:, :, None]
    Jg[:, 6:9] = -RB * T[:, :, None]
    return e, Ji, Jj, Jg


def radar_velocity_batch(R, v, ba, bg, omega, gdir, gmag, R_RI, p_IR, P: dict | None,
                         jac: bool = True):
    """Radar-frame ego velocity per scan and its Jacobians.

    With ``P`` (stacked node-to-scan preintegration) the node state is
    propagated to the scan time first; ``P=None`` evaluates at the node.
    Returns ``vR (K,3)``, ``Jn (K,3,15)``, ``Jg (K,3,2)`` and the 3x3 radar
    velocity covariance induced by the preintegration noise.  With ``jac``
    false the Jacobians are None.
    """
    K = len(R)
    RT = _T(R)
    Jn = np.zeros((K, 3, 15))
    Jg = np.zeros((K, 3, 2))
    Sp = skew(p_IR)
    if P is None:
        u = _mv(RT, v)
        cov = None
        if not jac:
            return _mv(R_RI, u + cross(omega - bg, p_IR)), None, None, cov
        Jn[:, :, 0:3] = skew(u)
        Jn[:, :, 6:9] = RT
        Jn[:, :, 12:15] = Sp
        cov = None
    else:
        phi, dR, dv, _ = _corrected(P, ba, bg)
        T = P["dt"][:, None]
        y = _mv(RT, v + gmag * gdir * T)
        dRT = _T(dR)
        u = _mv(dRT, y + dv)
        Su = skew(u)
        G = R_RI @ np.concatenate([Su, dRT], axis=2)  # d u / d(noise theta, noise v)
        cov = G @ P["cov_rv"] @ _T(G)
        if not jac:
            return _mv(R_RI, u + cross(omega - bg, p_IR)), None, None, cov
        Jn[:, :, 0:3] = dRT @ skew(y)
        Jn[:, :, 6:9] = dRT @ RT
        Jn[:, :, 9:12] = dRT @ P["Jvba"]
        Jn[:, :, 12:15] = Su @ so3_right_jacobian(phi) @ P["JR"] + dRT @ P["Jvbg"] + Sp
        Jg[:] = (dRT @ RT @ s2_basis(gdir)) * (gmag * T)[:, :, None]
    vI = u + cross(omega - bg, p_IR)
    vR = _mv(R_RI, vI)
    Jn = R_RI @ Jn
    Jg = R_RI @ Jg
    return vR, Jn, Jg, cov


def radar_rows(vR, Jn, Jg, cov, sid, bearings, speeds, sigma_r):
    """Stacked point rows: raw error, Jacobians and per-row sigma."""
    mu = bearings
    e = -np.einsum("ij,ij->i", mu, vR[sid]) - speeds
    Jrow = Jgrow = None
    if Jn is not None:
        Jrow = -np.einsum("ij,ijk->ik", mu, Jn[sid])
        Jgrow = -np.einsum("ij,ijk->ik", mu, Jg[sid])
    var = np.full(len(e), sigma_r * sigma_r)
    if cov is not None:
        var = var + np.einsum("ij,ijk,ik->i", mu, cov[sid], mu)
    return e, Jrow, Jgrow, np.sqrt(var)


def prior_batch(R, p, v, b, gdir, prior: PriorFactor):
    """Prior error (17,) and Jacobians w.r.t. the node (17,15) and gravity (17,2)."""
    Rp = prior.pose.R
    e_pose = se3_log(Rp.T @ R, Rp.T @ (p - prior.pose.t))
    e = np.concatenate([e_pose, prior.velocity - v, prior.bias.vector() - b,
                        -s2_ominus(gdir, prior.gravity)])
    Jn = np.zeros((17, 15))
    Jn[0:6, 0:6] = se3_right_jacobian_inv(e_pose)
    Jn[6:15, 6:15] = -np.eye(9)
    Jg = np.zeros((17, 2))
    Jg[15:17] = -s2_ominus_jacobian(gdir, prior.gravity)
    return e, Jn, Jg


# --------------------------------------------------------------------------
# Single-factor interface
# --------------------------------------------------------------------------

def _node_tuple(x: NavState):
    return (x.pose.R[None], x.pose.t[None], x.velocity[None],
            x.bias.accel[None], x.bias.gyro[None])


def lidar_residual(x_i: NavState, m: LidarPoseMeasurement, ext: Extrinsics) -> FactorResult:
    target = m.pose * ext.T_LI
    e, J = lidar_batch(x_i.pose.R[None], x_i.pose.t[None], target.R[None], target.t[None])
    Jx = np.zeros((6, 15))
    Jx[:, :6] = J[0]
    return _result(e[0], {"x_i": Jx}, lidar_sqrt_info(m, ext), robust=False)


def imu_residual(x_i: NavState, x_j: NavState, gravity: GravityVar, pim: PreintegratedImu,
                 noise: ImuNoiseParams | None = None) -> FactorResult:
    if not pim.dt > 0:
        raise ValueError("IMU factor needs a positive preintegration interval")
    noise = noise or pim.noise
    e, Ji, Jj, Jg = imu_batch(_node_tuple(x_i), _node_tuple(x_j), gravity.direction,
                              gravity.magnitude, stack_pims([pim]))
    jac = {"x_i": Ji[0], "x_j": Jj[0], "gravity": Jg[0]}
    return _result(e[0], jac, imu_sqrt_info(pim, noise), robust=False)


def radar_point_residual(v_R, mu, v_r: float) -> float:
    return float(-np.dot(mu, v_R) - v_r)


def radar_ego_velocity(R_WI, v_WI, b_g, omega, ext: Extrinsics) -> np.ndarray:
    v_I = np.asarray(R_WI).T @ np.asarray(v_WI, dtype=float) + np.cross(
        np.asarray(omega, dtype=float) - b_g, ext.p_IR)
    return ext.R_RI @ v_I


def radar_factor_baseline(x_i: NavState, scan: RadarScan, ext: Extrinsics,
                          sigma_r: float) -> FactorResult:
    R = x_i.pose.R
    v_R = radar_ego_velocity(R, x_i.velocity, x_i.bias.gyro, scan.gyro, ext)
    mu = scan.bearings
    e = -mu @ v_R - scan.speeds
    RRI = ext.R_RI
    # d v_R / d(theta, v, bg)
    dth = RRI @ skew(R.T @ x_i.velocity)
    dv = RRI @ R.T
    dbg = RRI @ skew(ext.p_IR)
    J = np.zeros((len(e), 15))
    J[:, 0:3] = -mu @ dth
    J[:, 6:9] = -mu @ dv
    J[:, 12:15] = -mu @ dbg
    s = np.full(len(e), 1.0 / sigma_r)
    return _result(e, {"x_i": J}, s, robust=True)


def radar_factor_preintegrated(x_i: NavState, gravity: GravityVar, pim_ir: PreintegratedImu,
                               scan: RadarScan, ext: Extrinsics, sigma_r: float,
                               t_i: int | None = None) -> FactorResult:
    if t_i is not None and abs(t_i + pim_ir.dt * 1e9 - scan.t) > 1.0:
        raise ValueError("preintegration span does not end at the scan time")
    R, p, v, ba, bg = _node_tuple(x_i)
    vR, Jn, Jg, cov = radar_velocity_batch(R, v, ba, bg, scan.gyro[None], gravity.direction,
                                           gravity.magnitude, ext.R_RI, ext.p_IR,
                                           stack_pims([pim_ir]))
    sid = np.zeros(len(scan), dtype=int)
    e, J, Jgr, sig = radar_rows(vR, Jn, Jg, cov, sid, scan.bearings, scan.speeds, sigma_r)
    return _result(e, {"x_i": J, "gravity": Jgr}, 1.0 / sig, robust=True)


def prior_residual(x: NavState, gravity: GravityVar, prior: PriorFactor) -> FactorResult:
    e, Jn, Jg = prior_batch(x.pose.R, x.pose.t, x.velocity, x.bias.vector(),
                            gravity.direction, prior)
    return _result(e, {"x_i": Jn, "gravity": Jg}, prior.sqrt_info, robust=False)


__all__ = [
    "HUBER_DELTA", "GRAVITY", "NavState", "GravityVar", "Extrinsics", "LidarPoseMeasurement",
    "RadarScan", "PriorFactor", "FactorResult", "huber_weight", "huber_loss",
    "lidar_residual", "imu_residual", "radar_point_residual", "radar_ego_velocity",
    "radar_factor_baseline", "radar_factor_preintegrated", "prior_residual",
    "imu_covariance", "imu_sqrt_info", "lidar_sqrt_info", "sqrt_information", "bias_correct",
]
