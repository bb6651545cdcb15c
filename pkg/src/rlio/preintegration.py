"""IMU preintegration on SO(3) x R^3 x R^3.

Each IMU sample is held constant over its hold interval and the motion over
that interval is integrated in closed form, so the deltas are exact for the
piecewise-constant input.  Covariance is propagated over ``(dtheta, dv, dp)``
and the five bias Jacobians are kept for first-order bias correction.

A sample at time ``t_k`` is held over ``[m_{k-1}, m_k)`` where ``m_k`` is the
midpoint between ``t_k`` and ``t_{k+1}`` (the first sample extends backwards,
the last forwards).  An interval boundary inside a hold interval splits it
proportionally.
"""
from __future__ import annotations

import bisect
import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .manifold import _scalar_coefficients, coefficients, skew, so3_exp

NS = 1_000_000_000
_I3 = np.eye(3)


@dataclass(frozen=True)
class ImuSample:
    t: int  # nanoseconds
    accel: np.ndarray
    gyro: np.ndarray


@dataclass
class ImuBias:
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(3)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.accel, self.gyro])

    @classmethod
    def from_vector(cls, b) -> "ImuBias":
        b = np.asarray(b, dtype=float)
        return cls(b[:3].copy(), b[3:].copy())


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time noise densities.

    accel: m/s^2/sqrt(Hz), gyro: rad/s/sqrt(Hz), random walks per sqrt(s).
    Zero densities are accepted here (noise-free preintegration); the
    smoother requires them to be strictly positive.
    """

    accel_noise_density: float = 2e-3
    gyro_noise_density: float = 2e-4
    accel_bias_rw: float = 1e-4
    gyro_bias_rw: float = 1e-5

    def __post_init__(self):
        for name in ("accel_noise_density", "gyro_noise_density",
                     "accel_bias_rw", "gyro_bias_rw"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _hold_terms(a: np.ndarray, phi: np.ndarray, full: bool):
    """Per-sample closed-form terms for holding ``a`` while rotating by ``phi``.

    ``a``, ``phi`` are ``(K,3)``.  Returns Exp(phi), M1 a, M2 a and, if
    ``full``, also Jr, M1, M2, N1 = d(M1 a)/d(phi), N2 = d(M2 a)/d(phi).
    """
    theta = np.sqrt(np.einsum("ki,ki->k", phi, phi))
    (_, f1, f2, f3, f4), (_, _, g2, g3, g4) = coefficients(theta, 4)
    c = [x[:, None, None] for x in (f1, f2, f3, f4)]
    W = skew(phi)
    W2 = W @ W
    E = _I3 + c[0] * W + c[1] * W2
    M1 = _I3 + c[1] * W + c[2] * W2
    M2 = 0.5 * _I3 + c[2] * W + c[3] * W2
    M1a = np.einsum("kij,kj->ki", M1, a)
    M2a = np.einsum("kij,kj->ki", M2, a)
    if not full:
        return E, M1a, M2a
    Jr = _I3 - c[1] * W + c[2] * W2
    pxa = np.einsum("kij,kj->ki", W, a)
    pdota = np.einsum("ki,ki->k", phi, a)[:, None]
    ppa = phi * pdota - a * (theta * theta)[:, None]
    lin = pdota[:, :, None] * _I3 + phi[:, :, None] * a[:, None, :] - 2.0 * a[:, :, None] * phi[:, None, :]
    Sa = skew(a)
    gp2, gp3, gp4 = (g[:, None] * phi for g in (g2, g3, g4))
    N1 = -c[1] * Sa + pxa[:, :, None] * gp2[:, None, :] + c[2] * lin + ppa[:, :, None] * gp3[:, None, :]
    N2 = -c[2] * Sa + pxa[:, :, None] * gp3[:, None, :] + c[3] * lin + ppa[:, :, None] * gp4[:, None, :]
    return E, M1a, M2a, Jr, M1, M2, N1, N2


def _exclusive_cumsum(x: np.ndarray, start: np.ndarray) -> np.ndarray:
    """``start`` followed by running sums of ``x`` (all but the last)."""
    out = np.empty_like(x)
    out[0] = start
    if len(x) > 1:
        out[1:] = start + np.cumsum(x[:-1], axis=0)
    return out


@dataclass
class PreintegratedImu:
    """Relative-motion summary between two instants.

    Covariance ``cov`` is over ``(dtheta, dv, dp)``.  ``bias_lin`` is the
    bias the samples were corrected with while integrating.  With
    ``track_jacobians=False`` only the deltas are propagated (output
    propagation does not need covariance or bias Jacobians).
    """

    bias_lin: ImuBias = field(default_factory=ImuBias)
    noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    dR: np.ndarray = field(default_factory=lambda: np.eye(3))
    dv: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dt: float = 0.0
    cov: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))
    J_R_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_v_ba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_v_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_p_ba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_p_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    track_jacobians: bool = True

    def copy(self) -> "PreintegratedImu":
        return copy.deepcopy(self)

    def _integrate(self, accel: np.ndarray, gyro: np.ndarray, dts: np.ndarray) -> None:
        """Hold each row of ``accel``/``gyro`` for the matching ``dts`` entry, in order."""
        K = len(dts)
        if K == 0:
            return
        dts = np.asarray(dts, dtype=float)
        if not self.track_jacobians and K <= 4:
            self._integrate_mean(accel, gyro, dts)
            return
        a = accel - self.bias_lin.accel
        phi = (gyro - self.bias_lin.gyro) * dts[:, None]
        full = self.track_jacobians
        terms = _hold_terms(a, phi, full)
        E, M1a, M2a = terms[:3]

        # rotation before each step
        Rs = np.empty((K, 3, 3))
        R = self.dR
        for k in range(K):
            Rs[k] = R
            R = R @ E[k]
        dt_ = dts[:, None]
        dt2 = dt_ * dt_
        inc_v = np.einsum("kij,kj->ki", Rs, M1a) * dt_
        v_prev = _exclusive_cumsum(inc_v, self.dv)
        inc_p = v_prev * dt_ + np.einsum("kij,kj->ki", Rs, M2a) * dt2

        if full:
            Jr, M1, M2, N1, N2 = terms[3:]
            d3 = dts[:, None, None]
            JRs = np.empty((K, 3, 3))
            J = self.J_R_bg
            for k in range(K):
                JRs[k] = J
                J = E[k].T @ J - Jr[k] * dts[k]
            RM1, RM2 = Rs @ M1, Rs @ M2
            RN1, RN2 = Rs @ N1, Rs @ N2
            RS1, RS2 = Rs @ skew(M1a), Rs @ skew(M2a)
            inc_vba = -RM1 * d3
            inc_vbg = -(RS1 @ JRs) * d3 - RN1 * d3 ** 2
            vba_prev = _exclusive_cumsum(inc_vba, self.J_v_ba)
            vbg_prev = _exclusive_cumsum(inc_vbg, self.J_v_bg)
            self.J_p_ba = self.J_p_ba + np.sum(vba_prev * d3 - RM2 * d3 ** 2, axis=0)
            self.J_p_bg = self.J_p_bg + np.sum(
                vbg_prev * d3 - (RS2 @ JRs) * d3 ** 2 - RN2 * d3 ** 3, axis=0)
            self.J_v_ba = self.J_v_ba + inc_vba.sum(axis=0)
            self.J_v_bg = self.J_v_bg + inc_vbg.sum(axis=0)
            self.J_R_bg = J

            nz = self.noise
            noisy = nz.accel_noise_density > 0 or nz.gyro_noise_density > 0
            if noisy or np.any(self.cov):
                A = np.zeros((K, 9, 9))
                A[:, 0:3, 0:3] = np.swapaxes(E, 1, 2)
                A[:, 3:6, 0:3] = -RS1 * d3
                A[:, 3:6, 3:6] = _I3
                A[:, 6:9, 0:3] = -RS2 * d3 ** 2
                A[:, 6:9, 3:6] = _I3 * d3
                A[:, 6:9, 6:9] = _I3
                Q = np.zeros((K, 9, 9))
                if noisy:
                    Bg = np.concatenate([Jr * d3, -RN1 * d3 ** 2, -RN2 * d3 ** 3], axis=1)
                    Ba = np.concatenate([np.zeros((K, 3, 3)), RM1 * d3, RM2 * d3 ** 2], axis=1)
                    qg = (nz.gyro_noise_density ** 2 / dts)[:, None, None]
                    qa = (nz.accel_noise_density ** 2 / dts)[:, None, None]
                    Q = qg * (Bg @ np.swapaxes(Bg, 1, 2)) + qa * (Ba @ np.swapaxes(Ba, 1, 2))
                C = self.cov
                for k in range(K):
                    C = A[k] @ C @ A[k].T + Q[k]
                self.cov = 0.5 * (C + C.T)

        self.dp = self.dp + inc_p.sum(axis=0)
        self.dv = v_prev[-1] + inc_v[-1]
        self.dR = R
        self.dt += float(dts.sum())

    def _integrate_mean(self, accel, gyro, dts) -> None:
        # per-sample deltas only, in plain floats: far cheaper than the batched
        # path when a handful of samples arrive at a time
        R, dv, dp = self.dR, self.dv, self.dp
        A = (np.asarray(accel, float) - self.bias_lin.accel).tolist()
        Phi = ((np.asarray(gyro, float) - self.bias_lin.gyro) * dts[:, None]).tolist()
        for (ax, ay, az), (px, py, pz), dt in zip(A, Phi, dts.tolist()):
            (_, f1, f2, f3, f4), _ = _scalar_coefficients(math.sqrt(px * px + py * py + pz * pz), 4)
            # phi x a and phi x (phi x a)
            qx, qy, qz = py * az - pz * ay, pz * ax - px * az, px * ay - py * ax
            sx, sy, sz = py * qz - pz * qy, pz * qx - px * qz, px * qy - py * qx
            M = np.array([[ax + f2 * qx + f3 * sx, 0.5 * ax + f3 * qx + f4 * sx],
                          [ay + f2 * qy + f3 * sy, 0.5 * ay + f3 * qy + f4 * sy],
                          [az + f2 * qz + f3 * sz, 0.5 * az + f3 * qz + f4 * sz]])
            RM = R @ M
            dp = dp + dv * dt + RM[:, 1] * (dt * dt)
            dv = dv + RM[:, 0] * dt
            # Exp(phi) = I + f1 [phi]x + f2 [phi]x^2
            xx, yy, zz = px * px, py * py, pz * pz
            xy, xz, yz = px * py, px * pz, py * pz
            E = np.array([[1.0 - f2 * (yy + zz), f2 * xy - f1 * pz, f2 * xz + f1 * py],
                          [f2 * xy + f1 * pz, 1.0 - f2 * (xx + zz), f2 * yz - f1 * px],
                          [f2 * xz - f1 * py, f2 * yz + f1 * px, 1.0 - f2 * (xx + yy)]])
            R = R @ E
            self.dt += dt
        self.dR, self.dv, self.dp = R, dv, dp

    def _step(self, accel: np.ndarray, gyro: np.ndarray, dt: float) -> None:
        self._integrate(np.asarray(accel, float)[None], np.asarray(gyro, float)[None],
                        np.array([dt]))


def integrate(pim: PreintegratedImu, sample: ImuSample, dt: float) -> PreintegratedImu:
    """Return ``pim`` advanced by holding ``sample`` for ``dt`` seconds."""
    if not dt > 0.0:
        raise ValueError(f"integration step must be positive, got dt={dt}")
    acc = np.asarray(sample.accel, dtype=float)
    gyr = np.asarray(sample.gyro, dtype=float)
    if not (np.all(np.isfinite(acc)) and np.all(np.isfinite(gyr))):
        raise ValueError("IMU sample contains non-finite values")
    out = pim.copy()
    out._step(acc, gyr, float(dt))
    return out


def bias_correct(pim: PreintegratedImu, bias: ImuBias):
    """First-order corrected deltas ``(dR, dv, dp)`` for a new bias estimate."""
    dba = bias.accel - pim.bias_lin.accel
    dbg = bias.gyro - pim.bias_lin.gyro
    dR = pim.dR @ so3_exp(pim.J_R_bg @ dbg)
    dv = pim.dv + pim.J_v_ba @ dba + pim.J_v_bg @ dbg
    dp = pim.dp + pim.J_p_ba @ dba + pim.J_p_bg @ dbg
    return dR, dv, dp


def predict_at(pim: PreintegratedImu, state, gravity: np.ndarray):
    """Orientation and velocity at the end of ``pim`` starting from ``state``.

    ``state`` needs ``.pose.R`` , ``.velocity`` and ``.bias``; ``gravity`` is the
    world-frame gravity vector.
    """
    dR, dv, _ = bias_correct(pim, state.bias)
    Ri = state.pose.R
    return Ri @ dR, state.velocity + gravity * pim.dt + Ri @ dv


def predict_position(pim: PreintegratedImu, state, gravity: np.ndarray) -> np.ndarray:
    _, _, dp = bias_correct(pim, state.bias)
    T = pim.dt
    return (state.pose.t + state.velocity * T + 0.5 * gravity * T * T
            + state.pose.R @ dp)


class ImuBuffer:
    """Time-ordered IMU history that builds preintegrated measurements."""

    def __init__(self):
        self._t: list[int] = []
        self._acc: list[np.ndarray] = []
        self._gyr: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._t)

    @property
    def times(self) -> list[int]:
        return self._t

    def add(self, sample: ImuSample) -> None:
        if self._t and sample.t <= self._t[-1]:
            raise ValueError(f"IMU timestamps must increase ({sample.t} <= {self._t[-1]})")
        self._t.append(int(sample.t))
        self._acc.append(np.asarray(sample.accel, dtype=float))
        self._gyr.append(np.asarray(sample.gyro, dtype=float))

    def sample(self, k: int) -> ImuSample:
        return ImuSample(self._t[k], self._acc[k], self._gyr[k])

    def prune_before(self, t: int) -> None:
        """Drop samples whose hold interval ends before ``t``."""
        k = bisect.bisect_left(self._t, t) - 2
        if k > 0:
            del self._t[:k], self._acc[:k], self._gyr[:k]

    def segments(self, t0: int, t1: int):
        """Yield ``(k, dt_seconds)`` hold pieces covering ``[t0, t1]``."""
        ts = self._t
        n = len(ts)
        if n == 0:
            raise ValueError("no IMU samples available")
        if t1 < t0:
            raise ValueError("interval end precedes start")
        # sample covering t0: nearest sample, ties go to the later one
        k = bisect.bisect_right(ts, t0)
        if k > 0 and (k == n or (t0 - ts[k - 1]) < (ts[k] - t0)):
            k -= 1
        start = t0
        while start < t1:
            end = t1 if k >= n - 1 else min(t1, (ts[k] + ts[k + 1]) / 2)
            if end > start:
                yield k, (end - start) * 1e-9
            start = end
            k += 1

    def preintegrate(self, t0: int, t1: int, bias: ImuBias,
                     noise: ImuNoiseParams) -> PreintegratedImu:
        pim = PreintegratedImu(bias_lin=ImuBias(bias.accel.copy(), bias.gyro.copy()), noise=noise)
        return self.extend(pim, t0, t1)

    def extend(self, pim: PreintegratedImu, t0: int, t1: int) -> PreintegratedImu:
        """Continue ``pim`` (covering up to ``t0``) in place until ``t1``."""
        seg = list(self.segments(t0, t1))
        if seg:
            ks = [k for k, _ in seg]
            pim._integrate(np.array([self._acc[k] for k in ks]),
                           np.array([self._gyr[k] for k in ks]),
                           np.array([dt for _, dt in seg]))
        return pim

    def gyro_at(self, t: int, tolerance_ns: int = 10_000_000) -> np.ndarray:
        """Gyro reading at ``t``: nearest sample within tolerance, else interpolated."""
        ts = self._t
        if not ts:
            raise ValueError("no IMU samples available")
        k = bisect.bisect_left(ts, t)
        cands = [j for j in (k - 1, k) if 0 <= j < len(ts)]
        j = min(cands, key=lambda j: abs(ts[j] - t))
        if abs(ts[j] - t) <= tolerance_ns or len(cands) < 2:
            return self._gyr[j].copy()
        lo, hi = cands
        w = (t - ts[lo]) / (ts[hi] - ts[lo])
        return (1 - w) * self._gyr[lo] + w * self._gyr[hi]
