"""SO(3), SE(3) and S^2 helpers.

All array functions broadcast over leading dimensions: a rotation vector is
``(..., 3)``, a rotation matrix ``(..., 3, 3)``.  The se(3) tangent ordering is
``(rotation, translation)`` everywhere in this package.

Conventions
-----------
* Perturbations are applied on the right: ``R <- R @ Exp(d)``.
* ``so3_log`` returns the principal logarithm with angle in ``[0, pi]``.  At
  exactly ``pi`` the axis sign is fixed so that its largest-magnitude
  component is positive.
* The S^2 tangent basis at ``b`` is ``e1 = unit(b x a)``, ``e2 = b x e1``, where
  ``a`` is the coordinate axis along which ``|b|`` has its smallest component
  (first index on ties).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8
# Below this angle the trigonometric coefficient functions are evaluated from
# their power series; above it from the closed forms.
_SERIES_MAX = 1.0
_SERIES_TERMS = 12


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        x, y, z = v
        return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    out = np.zeros(v.shape + (3,))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


_NMAX = 6
# f_n = sum_k (-1)^k t^(2k) / (2k+n)!,  g_n = f_n'(t) / t = sum_k (-1)^(k+1) 2(k+1) t^(2k) / (2k+2+n)!
_FC = np.array([[(-1) ** k / math.factorial(2 * k + n) for n in range(_NMAX + 1)]
                for k in range(_SERIES_TERMS)])
_GC = np.array([[(-1) ** (k + 1) * 2 * (k + 1) / math.factorial(2 * k + 2 + n)
                 for n in range(_NMAX + 1)] for k in range(_SERIES_TERMS)])
_POW = np.arange(_SERIES_TERMS)


def _closed(theta, nmax: int):
    """Closed-form f_n, g_n lists (valid for theta away from zero)."""
    t2 = theta * theta
    if isinstance(theta, float):
        s, c = math.sin(theta), math.cos(theta)
    else:
        s, c = np.sin(theta), np.cos(theta)
    fc = [c, s / theta]
    gc = [-fc[1], (fc[0] - fc[1]) / t2]
    for n in range(2, nmax + 1):
        fn = (1.0 / math.factorial(n - 2) - fc[n - 2]) / t2
        fc.append(fn)
        gc.append(-(gc[n - 2] + 2.0 * fn) / t2)
    return fc, gc


# per-order (f, g) coefficient pairs, highest power first, as plain floats
_HORNER = [list(zip(_FC[::-1, n].tolist(), _GC[::-1, n].tolist())) for n in range(_NMAX + 1)]


def _scalar_coefficients(theta: float, nmax: int):
    if theta >= _SERIES_MAX:
        fc, gc = _closed(theta, nmax)
        return fc[:nmax + 1], gc[:nmax + 1]
    t2 = theta * theta
    fs, gs = [], []
    for n in range(nmax + 1):
        f = g = 0.0
        for cf, cg in _HORNER[n]:
            f = f * t2 + cf
            g = g * t2 + cg
        fs.append(f)
        gs.append(g)
    return fs, gs


def coefficients(theta, nmax: int = 4) -> tuple[list, list]:
    """Return ``f_n(theta)`` and ``g_n(theta) = f_n'(theta)/theta`` for n <= nmax.

    ``f_n = sum_k (-1)^k theta^(2k) / (2k+n)!``, so ``Exp(w) = I + f1 W + f2 W^2``,
    ``Jl(w) = I + f2 W + f3 W^2`` and so on.  Evaluated by series for small
    angles, by the closed-form recursion otherwise.
    """
    if nmax > _NMAX:
        raise ValueError(f"nmax <= {_NMAX} supported")
    if isinstance(theta, float) or np.ndim(theta) == 0:
        fs, gs = _scalar_coefficients(float(theta), nmax)
        return [np.float64(f) for f in fs], [np.float64(g) for g in gs]
    theta = np.asarray(theta, dtype=float)
    t2 = theta * theta
    pw = t2[..., None] ** _POW
    F = pw @ _FC[:, :nmax + 1]
    G = pw @ _GC[:, :nmax + 1]
    big = theta >= _SERIES_MAX
    if np.any(big):
        fc, gc = _closed(theta[big], nmax)
        F[big] = np.stack(fc[:nmax + 1], axis=-1)
        G[big] = np.stack(gc[:nmax + 1], axis=-1)
    return [F[..., n] for n in range(nmax + 1)], [G[..., n] for n in range(nmax + 1)]


def cross(a, b) -> np.ndarray:
    """Cross product over the last axis (cheaper than ``np.cross`` for small inputs)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1 and b.ndim == 1:
        return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
                         a[0] * b[1] - a[1] * b[0]])
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def norm(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return math.sqrt(float(v @ v))
    return np.sqrt(np.einsum("...i,...i->...", v, v))


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; exact series below the small-angle threshold."""
    w = np.asarray(w, dtype=float)
    theta = norm(w)
    (_, f1, f2), _ = coefficients(theta, 2)
    W = skew(w)
    if w.ndim == 1:
        return np.eye(3) + f1 * W + f2 * (W @ W)
    return np.eye(3) + f1[..., None, None] * W + f2[..., None, None] * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal logarithm of a rotation matrix, angle in ``[0, pi]``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R, axis1=-2, axis2=-1)
    s = 0.5 * vee(R - np.swapaxes(R, -1, -2))  # sin(theta) * axis
    sin_t = norm(s)
    cos_t = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    theta = np.arctan2(sin_t, cos_t)

    # regular branch: w = theta / sin(theta) * s
    small = theta < SMALL_ANGLE
    safe_sin = np.where(small | (sin_t <= 0.0), 1.0, sin_t)
    scale = np.where(small, 1.0 + theta * theta / 6.0, theta / safe_sin)
    w = scale[..., None] * s

    # near pi: the symmetric part gives the axis, the skew part its sign
    near_pi = cos_t < -0.99
    if np.any(near_pi):
        B = 0.5 * (R + np.swapaxes(R, -1, -2)) - cos_t[..., None, None] * np.eye(3)
        diag = np.diagonal(B, axis1=-2, axis2=-1)
        k = np.argmax(diag, axis=-1)
        col = np.take_along_axis(B, k[..., None, None], axis=-1)[..., 0]
        axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
        proj = np.sum(axis * s, axis=-1)
        big_idx = np.argmax(np.abs(axis), axis=-1)
        lead = np.take_along_axis(axis, big_idx[..., None], axis=-1)[..., 0]
        sign = np.where(np.abs(proj) > 1e-15, np.sign(proj), np.sign(lead))
        w_pi = (sign * theta)[..., None] * axis
        w = np.where(near_pi[..., None], w_pi, w)
    return w


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    (_, _, f2, f3), _ = coefficients(norm(w), 3)
    W = skew(w)
    return np.eye(3) + f2[..., None, None] * W + f3[..., None, None] * (W @ W)


def so3_right_jacobian(w: np.ndarray) -> np.ndarray:
    """``Exp(w + d) ~= Exp(w) Exp(Jr(w) d)``."""
    return so3_left_jacobian(-np.asarray(w, dtype=float))


def _jinv_coeff(theta: np.ndarray) -> np.ndarray:
    # (1 - (t/2) cot(t/2)) / t^2
    small = theta < 0.1
    ts = np.where(small, 1.0, theta)
    closed = (1.0 - 0.5 * ts * np.cos(0.5 * ts) / np.sin(0.5 * ts)) / (ts * ts)
    t2 = theta * theta
    series = 1 / 12 + t2 * (1 / 720 + t2 * (1 / 30240 + t2 * (1 / 1209600 + t2 / 47900160)))
    return np.where(small, series, closed)


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    c = _jinv_coeff(norm(w))
    W = skew(w)
    return np.eye(3) - 0.5 * W + c[..., None, None] * (W @ W)


def so3_right_jacobian_inv(w: np.ndarray) -> np.ndarray:
    return so3_left_jacobian_inv(-np.asarray(w, dtype=float))


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponential of a ``(rotation, translation)`` twist; returns ``(R, t)``."""
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    R = so3_exp(phi)
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
    return R, t


def se3_log(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Logarithm of ``(R, t)`` as a ``(rotation, translation)`` 6-vector."""
    phi = so3_log(R)
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), np.asarray(t, dtype=float))
    return np.concatenate([phi, rho], axis=-1)


def _se3_q(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    theta = norm(phi)
    fs, _ = coefficients(theta, 5)
    c1 = fs[3][..., None, None]
    c2 = fs[4][..., None, None]
    c3 = (0.5 * (fs[4] - 3.0 * fs[5]))[..., None, None]
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    return (0.5 * Rh + c1 * (PR + RP + PRP)
            + c2 * (P @ PR + RP @ P - 3.0 * PRP)
            + c3 * (PRP @ P + P @ PRP))


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    J = so3_left_jacobian(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., 3:, :3] = _se3_q(phi, rho)
    return out


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian, ``Log(T Exp(d)) ~= Log(T) + Jr^-1(Log T) d``."""
    xi = -np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    Ji = so3_left_jacobian_inv(phi)
    Q = _se3_q(phi, rho)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., 3:, :3] = -Ji @ Q @ Ji
    return out


def se3_adjoint(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Adjoint in ``(rotation, translation)`` ordering: ``[[R, 0], [t^ R, R]]``."""
    R = np.asarray(R, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = skew(t) @ R
    return out


def renormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-orthonormal matrix back onto SO(3) (one polar Newton step)."""
    R = np.asarray(R, dtype=float)
    return 0.5 * R @ (3.0 * np.eye(3) - np.swapaxes(R, -1, -2) @ R)


# --------------------------------------------------------------------------
# Unit sphere
# --------------------------------------------------------------------------

def s2_basis(b: np.ndarray) -> np.ndarray:
    """Orthonormal tangent basis at unit vector ``b`` as a ``(..., 3, 2)`` matrix."""
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        ab = np.abs(b)
        k = 0 if ab[0] <= ab[1] and ab[0] <= ab[2] else (1 if ab[1] <= ab[2] else 2)
        e1 = cross(b, np.eye(3)[k])
        e1 /= norm(e1)
        return np.column_stack([e1, cross(b, e1)])
    k = np.argmin(np.abs(b), axis=-1)
    axis = np.eye(3)[k]
    e1 = cross(b, axis)
    e1 /= norm(e1)[..., None]
    e2 = cross(b, e1)
    return np.stack([e1, e2], axis=-1)


def s2_oplus(b: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Move along the geodesic from ``b`` by tangent coordinates ``d``."""
    b = np.asarray(b, dtype=float)
    w = s2_basis(b) @ np.asarray(d, dtype=float)
    theta = norm(w)
    (_, f1), _ = coefficients(theta, 1)
    out = math.cos(theta) * b + f1 * w
    return out / norm(out)


def _s2_log(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    c = min(1.0, max(-1.0, float(a @ b)))
    u = a - c * b
    s = norm(u)
    theta = math.atan2(s, c)
    if np.pi - theta < 1e-9:
        raise ValueError("s2_ominus: antipodal vectors have no unique tangent direction")
    return u, theta, np.array(c)


def s2_ominus(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Tangent coordinates at ``b`` such that ``s2_oplus(b, result) == a``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u, theta, _ = _s2_log(a, b)
    (_, f1), _ = coefficients(theta, 1)
    # theta / sin(theta) = 1 / f1
    return s2_basis(b).T @ (u / f1)


def s2_ominus_jacobian(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Derivative of ``s2_ominus(a, b)`` w.r.t. ``a`` moved by ``s2_oplus(a, d)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u, theta, c = _s2_log(a, b)
    (_, f1), (_, g1) = coefficients(theta, 1)
    s = f1 * theta
    # d/da [u * theta / sin(theta)], a constrained to the sphere
    ratio = 1.0 / f1
    # d(theta/sin)/d(theta) = -g1 * theta / f1^2 ; d(theta) = -(b . da) / sin
    dratio_dtheta = -g1 * theta / (f1 * f1)
    P = np.eye(3) - np.outer(b, b)
    if s > 0.0:
        J = ratio * P + dratio_dtheta * np.outer(u, -b / s)
    else:
        J = P
    return s2_basis(b).T @ J @ s2_basis(a)


def unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# Value types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Rot3:
    """Element of SO(3) stored as a rotation matrix.

    Composition renormalizes, so long products stay orthonormal.
    """

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rot3":
        return cls(np.eye(3))

    @classmethod
    def exp(cls, w) -> "Rot3":
        return cls(so3_exp(w))

    def log(self) -> np.ndarray:
        return so3_log(self.matrix)

    def inverse(self) -> "Rot3":
        return Rot3(self.matrix.T)

    def compose(self, other: "Rot3") -> "Rot3":
        return Rot3(renormalize(self.matrix @ other.matrix))

    def __mul__(self, other: "Rot3") -> "Rot3":
        return self.compose(other)

    def act(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)


@dataclass(frozen=True)
class Pose3:
    """Rigid transform ``T_AB = (R_AB, t_AB)`` mapping frame-B points into A."""

    rotation: Rot3 = field(default_factory=Rot3)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not isinstance(self.rotation, Rot3):
            object.__setattr__(self, "rotation", Rot3(self.rotation))
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose3":
        return cls()

    @classmethod
    def exp(cls, xi) -> "Pose3":
        R, t = se3_exp(xi)
        return cls(Rot3(R), t)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def log(self) -> np.ndarray:
        return se3_log(self.R, self.t)

    def inverse(self) -> "Pose3":
        Rt = self.R.T
        return Pose3(Rot3(Rt), -Rt @ self.t)

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(self.rotation * other.rotation, self.R @ other.t + self.t)

    def __mul__(self, other: "Pose3") -> "Pose3":
        return self.compose(other)

    def act(self, p) -> np.ndarray:
        return self.R @ np.asarray(p, dtype=float) + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m
