from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.spatial.transform import Rotation

from rlio.factors import GravityVar, NavState
from rlio.manifold import Pose3, Rot3
from rlio.preintegration import ImuBias

settings.register_profile("rlio", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rlio")

ACCEPTANCE_LINES: list[str] = []

# body rates up to ~0.55 rad/s and accelerations ~3 m/s^2
CURVED = dict(pos_amp=(1.0, 0.8, 0.3), pos_freq=(0.2, 0.25, 0.3),
              att_amp=(0.5, 0.3, 0.3), att_freq=(0.15, 0.2, 0.25), hold=0.0, ramp=0.5)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng) -> np.ndarray:
    return Rotation.random(random_state=rng.integers(2**31)).as_matrix()


def random_pose(rng, scale: float = 5.0) -> Pose3:
    return Pose3(Rot3(random_rotation(rng)), rng.uniform(-scale, scale, 3))


def random_state(rng) -> NavState:
    return NavState(random_pose(rng), rng.normal(0, 2.0, 3),
                    ImuBias(rng.normal(0, 0.1, 3), rng.normal(0, 0.01, 3)))


def random_gravity(rng) -> GravityVar:
    d = rng.normal(size=3)
    return GravityVar(d / np.linalg.norm(d), 9.81)


def central_jacobian(f, dim: int, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``f(delta)`` around ``delta = 0``."""
    cols = []
    for i in range(dim):
        d = np.zeros(dim)
        d[i] = h
        cols.append((np.asarray(f(d)) - np.asarray(f(-d))) / (2 * h))
    return np.column_stack(cols)


def rel_err(J_num: np.ndarray, J: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.linalg.norm(J_num - J) / max(np.linalg.norm(J), floor))


def fine_step_oracle(model, t0: float, t1: float, factor: int = 100, rate: float = 200.0):
    """Integrate the continuous IMU signal with steps ``1/(rate*factor)`` (midpoint rule).

    Rotation increments use scipy's rotation-vector exponential.  Returns
    (dR, dv, dp) in the frame at ``t0``.
    """
    h = 1.0 / (rate * factor)
    n = int(round((t1 - t0) / h))
    tm = t0 + (np.arange(n) + 0.5) * h
    R, _, _, a, w = model.evaluate(tm)
    f = np.einsum("kji,kj->ki", R, a - np.array([0.0, 0.0, -9.81]))
    dR = Rotation.identity()
    dv = np.zeros(3)
    dp = np.zeros(3)
    steps = Rotation.from_rotvec(w * h)
    for k in range(n):
        half = dR * Rotation.from_rotvec(w[k] * h / 2)
        acc = half.apply(f[k])
        dp = dp + dv * h + 0.5 * acc * h * h
        dv = dv + acc * h
        dR = dR * steps[k]
    return dR.as_matrix(), dv, dp
