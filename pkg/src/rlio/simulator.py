"""Deterministic trajectories and synthetic IMU / LiDAR-pose / radar-Doppler streams.

Ground truth is analytic: a smooth envelope (stationary hold, then a C^2
quintic ramp) multiplies sinusoidal position and Euler-angle profiles, or a
straight out-and-back "tunnel" run with a 180 degree turn at the far end.
World gravity is ``(0, 0, -g)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .factors import Extrinsics, LidarPoseMeasurement, RadarScan
from .manifold import Pose3, Rot3, se3_exp
from .preintegration import ImuBuffer, ImuNoiseParams, ImuSample

NS = 1_000_000_000


def _smoothstep(u):
    """Quintic smoothstep and its first two derivatives w.r.t. ``u`` (clamped)."""
    u = np.clip(u, 0.0, 1.0)
    s = u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
    ds = 30.0 * u * u * (1.0 - u) ** 2
    dds = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u)
    return s, ds, dds


@dataclass
class TrajectoryModel:
    """Analytic trajectory.

    ``kind="sinusoid"``: per-axis position sinusoids and yaw/pitch/roll
    sinusoids, all multiplied by an envelope that is zero during ``hold``
    and ramps to one over ``ramp`` seconds.  ``kind="tunnel"``: travel
    ``tunnel_length`` metres along world x, turn in place, come back; small
    lateral and attitude sinusoids keep the IMU excited.  Phases left as
    ``None`` are drawn from ``seed``.
    """

    kind: str = "sinusoid"
    duration: float = 60.0
    hold: float = 1.0
    ramp: float = 2.0
    pos_amp: tuple = (2.0, 1.5, 0.3)
    pos_freq: tuple = (0.05, 0.08, 0.11)
    pos_phase: tuple | None = None
    att_amp: tuple = (0.6, 0.1, 0.1)  # yaw, pitch, roll (rad)
    att_freq: tuple = (0.04, 0.13, 0.17)
    att_phase: tuple | None = None
    tunnel_length: float = 50.0
    turn_duration: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sinusoid", "tunnel"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        rng = np.random.default_rng([self.seed, 101])
        if self.pos_phase is None:
            self.pos_phase = tuple(rng.uniform(0, 2 * np.pi, 3))
        if self.att_phase is None:
            self.att_phase = tuple(rng.uniform(0, 2 * np.pi, 3))

    @classmethod
    def tunnel_run(cls, duration: float = 60.0, seed: int = 0, **kw) -> "TrajectoryModel":
        """Corridor flight: steady heading, small lateral/vertical and tilt wiggles."""
        kw.setdefault("pos_amp", (0.0, 0.3, 0.2))
        kw.setdefault("att_amp", (0.0, 0.02, 0.02))
        return cls(kind="tunnel", duration=duration, seed=seed, **kw)

    # -- scalar profiles --------------------------------------------------
    def _envelope(self, t):
        if self.ramp <= 0:
            e = (t >= self.hold).astype(float)
            return e, 0 * e, 0 * e
        s, ds, dds = _smoothstep((t - self.hold) / self.ramp)
        return s, ds / self.ramp, dds / self.ramp ** 2

    def _sines(self, t, amp, freq, phase):
        """Envelope-modulated sinusoids: value, first and second derivative, (n,3)."""
        amp, w, ph = np.asarray(amp, float), 2 * np.pi * np.asarray(freq, float), np.asarray(phase, float)
        arg = w * t[:, None] + ph
        q = amp * np.sin(arg)
        dq = amp * w * np.cos(arg)
        ddq = -amp * w * w * np.sin(arg)
        e, de, dde = (x[:, None] for x in self._envelope(t))
        return e * q, de * q + e * dq, dde * q + 2 * de * dq + e * ddq

    def _tunnel(self, t):
        """Position along x and yaw turn for the tunnel run."""
        start = self.hold
        leg = 0.5 * (self.duration - self.hold - self.turn_duration - 1.0)
        if leg <= 0:
            raise ValueError("tunnel duration too short for hold + turn")
        L = self.tunnel_length
        s1, d1, dd1 = _smoothstep((t - start) / leg)
        t_back = start + leg + self.turn_duration
        s2, d2, dd2 = _smoothstep((t - t_back) / leg)
        x = L * (s1 - s2)
        dx = L * (d1 - d2) / leg
        ddx = L * (dd1 - dd2) / leg ** 2
        sy, dy, ddy = _smoothstep((t - start - leg) / self.turn_duration)
        yaw = np.pi * sy
        dyaw = np.pi * dy / self.turn_duration
        ddyaw = np.pi * ddy / self.turn_duration ** 2
        return (x, dx, ddx), (yaw, dyaw, ddyaw)

    def evaluate(self, t):
        """Vectorized ground truth at times ``t`` (s).

        Returns ``R (n,3,3)``, ``p``, ``v``, ``a`` (world) and body rates ``w``.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        p, v, a = self._sines(t, self.pos_amp, self.pos_freq, self.pos_phase)
        eul, deul, _ = self._sines(t, self.att_amp, self.att_freq, self.att_phase)
        if self.kind == "tunnel":
            (x, dx, ddx), (yaw, dyaw, _) = self._tunnel(t)
            p[:, 0] += x
            v[:, 0] += dx
            a[:, 0] += ddx
            eul[:, 0] += yaw
            deul[:, 0] += dyaw
        psi, th, ph = eul.T
        dpsi, dth, dph = deul.T
        R = Rotation.from_euler("ZYX", eul).as_matrix()
        w = np.stack([dph - dpsi * np.sin(th),
                      dth * np.cos(ph) + dpsi * np.cos(th) * np.sin(ph),
                      -dth * np.sin(ph) + dpsi * np.cos(th) * np.cos(ph)], axis=1)
        return R, p, v, a, w


def sample_ground_truth(model: TrajectoryModel, t: float):
    """``(Pose3, velocity, acceleration, body angular velocity)`` at ``t`` seconds."""
    if not 0.0 <= t <= model.duration:
        raise ValueError(f"t={t} outside [0, {model.duration}]")
    R, p, v, a, w = model.evaluate(t)
    return Pose3(Rot3(R[0]), p[0]), v[0], a[0], w[0]


@dataclass
class DegeneracyProfile:
    """``axis=None``: no degeneracy.  Otherwise the LiDAR translational
    covariance along the world ``axis`` is multiplied by ``inflation``."""

    axis: tuple | None = None
    inflation: float = 1.0

    def __post_init__(self):
        if not self.inflation >= 1.0:
            raise ValueError("inflation must be >= 1")
        if self.axis is not None:
            a = np.asarray(self.axis, dtype=float)
            self.axis = tuple(a / np.linalg.norm(a))

    @classmethod
    def tunnel(cls, axis=(1.0, 0.0, 0.0), inflation: float = 1e6) -> "DegeneracyProfile":
        return cls(axis, inflation)


def _pose_from(rotvec, trans) -> Pose3:
    return Pose3(Rot3(Rotation.from_rotvec(rotvec).as_matrix()), np.asarray(trans, float))


@dataclass
class SensorRig:
    imu_rate: float = 200.0
    lidar_rate: float = 10.0
    radar_rate: float = 10.0
    radar_offset: float = 0.05
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    T_IL_rotvec: tuple = (0.0, 0.0, 0.1)
    T_IL_trans: tuple = (0.05, 0.0, 0.1)
    T_IR_rotvec: tuple = (0.0, 0.05, 0.0)
    T_IR_trans: tuple = (0.1, 0.0, -0.05)
    sigma_lidar_pos: float = 0.01
    sigma_lidar_rot: float = math.radians(0.2)
    sigma_r: float = 0.15
    radar_points: int = 20
    outlier_fraction: float = 0.05
    radar_fov_deg: float = 60.0  # half-angle of the bearing cone
    outlier_vmax: float = 10.0
    accel_bias0: tuple = (0.05, -0.03, 0.04)
    gyro_bias0: tuple = (0.002, -0.001, 0.0015)
    gravity: float = 9.81
    noise_free: bool = False

    def __post_init__(self):
        for name in ("imu_rate", "lidar_rate", "radar_rate", "sigma_lidar_pos",
                     "sigma_lidar_rot", "sigma_r", "gravity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.radar_offset < 1.0 / self.lidar_rate:
            raise ValueError("radar_offset must lie in [0, 1/lidar_rate)")
        if self.radar_points < 1:
            raise ValueError("radar_points must be >= 1")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1]")

    @property
    def extrinsics(self) -> Extrinsics:
        return Extrinsics(_pose_from(self.T_IL_rotvec, self.T_IL_trans),
                          _pose_from(self.T_IR_rotvec, self.T_IR_trans))


def _ticks(rate: float, duration: float, offset: float = 0.0) -> np.ndarray:
    period = int(round(NS / rate))
    off = int(round(offset * NS))
    n = int((duration * NS - off) // period) + 1
    return off + period * np.arange(max(n, 0), dtype=np.int64)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def synth_imu(model: TrajectoryModel, rig: SensorRig, seed: int = 0) -> list[ImuSample]:
    ts = _ticks(rig.imu_rate, model.duration)
    R, _, _, a, w = model.evaluate(ts / NS)
    g = np.array([0.0, 0.0, -rig.gravity])
    f = np.einsum("kji,kj->ki", R, a - g)
    if not rig.noise_free:
        rng = _rng(seed, 1)
        n = len(ts)
        dt = 1.0 / rig.imu_rate
        nz = rig.imu_noise
        ba = np.asarray(rig.accel_bias0) + np.cumsum(
            rng.normal(0, nz.accel_bias_rw * math.sqrt(dt), (n, 3)), axis=0)
        bg = np.asarray(rig.gyro_bias0) + np.cumsum(
            rng.normal(0, nz.gyro_bias_rw * math.sqrt(dt), (n, 3)), axis=0)
        f = f + ba + rng.normal(0, nz.accel_noise_density * math.sqrt(rig.imu_rate), (n, 3))
        w = w + bg + rng.normal(0, nz.gyro_noise_density * math.sqrt(rig.imu_rate), (n, 3))
    return [ImuSample(int(t), f[k], w[k]) for k, t in enumerate(ts)]


def lidar_covariance(rig: SensorRig, profile: DegeneracyProfile | None, R_WL: np.ndarray) -> np.ndarray:
    cov = np.diag([rig.sigma_lidar_rot ** 2] * 3 + [rig.sigma_lidar_pos ** 2] * 3)
    if profile is not None and profile.axis is not None and profile.inflation > 1.0:
        a = R_WL.T @ np.asarray(profile.axis)
        cov[3:, 3:] += rig.sigma_lidar_pos ** 2 * (profile.inflation - 1.0) * np.outer(a, a)
    return cov


def synth_lidar(model: TrajectoryModel, rig: SensorRig, profile: DegeneracyProfile | None = None,
                seed: int = 0) -> list[LidarPoseMeasurement]:
    ts = _ticks(rig.lidar_rate, model.duration)
    R, p, _, _, _ = model.evaluate(ts / NS)
    T_IL = rig.extrinsics.T_IL
    rng = _rng(seed, 2)
    out = []
    for k, t in enumerate(ts):
        R_WL = R[k] @ T_IL.R
        p_WL = R[k] @ T_IL.t + p[k]
        cov = lidar_covariance(rig, profile, R_WL)
        if rig.noise_free:
            pose = Pose3(Rot3(R_WL), p_WL)
        else:
            lam, V = np.linalg.eigh(cov)
            xi = V @ (np.sqrt(np.maximum(lam, 0)) * rng.standard_normal(6))
            dR, dt = se3_exp(xi)
            pose = Pose3(Rot3(R_WL @ dR), R_WL @ dt + p_WL)
        out.append(LidarPoseMeasurement(int(t), pose, cov))
    return out


def _cone_bearings(rng: np.random.Generator, n: int, half_angle: float) -> np.ndarray:
    cz = rng.uniform(math.cos(half_angle), 1.0, n)
    az = rng.uniform(0, 2 * np.pi, n)
    sz = np.sqrt(1 - cz * cz)
    # cone about the radar +x axis
    return np.stack([cz, sz * np.cos(az), sz * np.sin(az)], axis=1)


def synth_radar(model: TrajectoryModel, rig: SensorRig, seed: int = 0,
                imu: list[ImuSample] | None = None) -> list[RadarScan]:
    ts = _ticks(rig.radar_rate, model.duration, rig.radar_offset)
    R, _, v, _, w = model.evaluate(ts / NS)
    ext = rig.extrinsics
    if imu is None:
        imu = synth_imu(model, rig, seed)
    buf = ImuBuffer()
    for s in imu:
        buf.add(s)
    rng = _rng(seed, 3)
    half = math.radians(rig.radar_fov_deg)
    out = []
    for k, t in enumerate(ts):
        vI = R[k].T @ v[k] + np.cross(w[k], ext.p_IR)
        vR = ext.R_RI @ vI
        mu = _cone_bearings(rng, rig.radar_points, half)
        speeds = -mu @ vR
        if not rig.noise_free:
            speeds = speeds + rng.normal(0, rig.sigma_r, len(speeds))
            bad = rng.random(len(speeds)) < rig.outlier_fraction
            speeds[bad] = rng.uniform(-rig.outlier_vmax, rig.outlier_vmax, int(bad.sum()))
        out.append(RadarScan(int(t), mu, speeds, buf.gyro_at(int(t))))
    return out


@dataclass
class Streams:
    imu: list
    lidar: list
    radar: list
    model: TrajectoryModel | None = None

    def merged(self):
        """Time-ordered messages; at equal stamps IMU precedes LiDAR precedes radar."""
        items = ([(s.t, 0, s) for s in self.imu] + [(m.t, 1, m) for m in self.lidar]
                 + [(r.t, 2, r) for r in self.radar])
        items.sort(key=lambda x: (x[0], x[1]))
        return [(kind, msg) for _, kind, msg in items]


def simulate(model: TrajectoryModel, rig: SensorRig, profile: DegeneracyProfile | None = None,
             seed: int = 0) -> Streams:
    imu = synth_imu(model, rig, seed)
    return Streams(imu, synth_lidar(model, rig, profile, seed),
                   synth_radar(model, rig, seed, imu), model)


# --------------------------------------------------------------------------
# Text formats
# --------------------------------------------------------------------------

STREAM_HEADER = "# rlio-stream v2"
STREAM_DOC = """\
# One record per line, whitespace separated, timestamps in integer ns:
#   imu   <t> ax ay az gx gy gz
#   lidar <t> r00 r01 ... r22 x y z c00 c01 ... c55   (row-major rotation, 6x6 covariance)
#   radar <t> gx gy gz n  mu_x mu_y mu_z v_r  (repeated n times)
"""


def _fmt(x) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(x))


def write_stream(path, streams: Streams) -> None:
    lines = [STREAM_HEADER, STREAM_DOC.rstrip("\n")]
    for kind, msg in streams.merged():
        if kind == 0:
            lines.append(f"imu {msg.t} {_fmt(msg.accel)} {_fmt(msg.gyro)}")
        elif kind == 1:
            # the matrix is written verbatim so replay is bit-exact
            lines.append(f"lidar {msg.t} {_fmt(msg.pose.R)} {_fmt(msg.pose.t)} {_fmt(msg.cov)}")
        else:
            pts = np.column_stack([msg.bearings, msg.speeds])
            lines.append(f"radar {msg.t} {_fmt(msg.gyro)} {len(msg)} {_fmt(pts)}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


def read_stream(path) -> Streams:
    imu, lidar, radar = [], [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        tag, t = tok[0], int(tok[1])
        vals = np.array(tok[2:], dtype=float)
        if tag == "imu":
            imu.append(ImuSample(t, vals[0:3], vals[3:6]))
        elif tag == "lidar":
            R = vals[0:9].reshape(3, 3)
            lidar.append(LidarPoseMeasurement(t, Pose3(Rot3(R), vals[9:12]), vals[12:48].reshape(6, 6)))
        elif tag == "radar":
            k = int(vals[3])
            pts = vals[4:4 + 4 * k].reshape(k, 4)
            radar.append(RadarScan(t, pts[:, :3], pts[:, 3], vals[0:3]))
        else:
            raise ValueError(f"{path}:{n}: unknown record tag {tag!r}")
    return Streams(imu, lidar, radar)


@dataclass
class Trajectory:
    t: np.ndarray  # int ns
    p: np.ndarray  # (n,3)
    R: np.ndarray  # (n,3,3)

    def __len__(self) -> int:
        return len(self.t)


def ground_truth_trajectory(model: TrajectoryModel, rate: float = 200.0) -> Trajectory:
    ts = _ticks(rate, model.duration)
    R, p, _, _, _ = model.evaluate(ts / NS)
    return Trajectory(ts, p, R)


def write_tum(path, traj: Trajectory) -> None:
    q = Rotation.from_matrix(traj.R).as_quat()
    with open(path, "w") as fh:
        for k in range(len(traj)):
            fh.write(f"{traj.t[k] / NS:.9f} {_fmt(traj.p[k])} {_fmt(q[k])}\n")


def read_tum(path) -> Trajectory:
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] != 8:
        raise ValueError(f"{path}: expected 8 columns (t x y z qx qy qz qw)")
    t = np.round(data[:, 0] * NS).astype(np.int64)
    return Trajectory(t, data[:, 1:4], Rotation.from_quat(data[:, 4:8]).as_matrix())
