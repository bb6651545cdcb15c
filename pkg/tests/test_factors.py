from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

import jacobian_suite as js
from conftest import CURVED, random_gravity, random_pose, random_state
from rlio.factors import (HUBER_DELTA, Extrinsics, GravityVar, LidarPoseMeasurement, NavState,
                          PriorFactor, RadarScan, huber_loss, huber_weight, imu_residual,
                          lidar_residual, prior_residual, radar_ego_velocity,
                          radar_factor_baseline, radar_factor_preintegrated,
                          radar_point_residual)
from rlio.manifold import Pose3, Rot3, se3_adjoint
from rlio.preintegration import (NS, ImuBias, ImuBuffer, ImuNoiseParams,
                                 PreintegratedImu, predict_at, predict_position)
from rlio.simulator import SensorRig, TrajectoryModel, sample_ground_truth, synth_imu

SIGMA_R = 0.15
DOWN = GravityVar(np.array([0.0, 0.0, -1.0]), 9.81)


@pytest.fixture(scope="module")
def curved():
    model = TrajectoryModel(duration=6.0, seed=7, **CURVED)
    rig = SensorRig(noise_free=True)
    buf = ImuBuffer()
    for s in synth_imu(model, rig):
        buf.add(s)
    return model, rig, buf


def truth_state(model, t: float) -> NavState:
    pose, v, _, _ = sample_ground_truth(model, t)
    return NavState(pose, v, ImuBias())


def stationary_pim(n: int = 20, dt: float = 0.005) -> PreintegratedImu:
    pim = PreintegratedImu()
    pim._integrate(np.tile([0.0, 0.0, 9.81], (n, 1)), np.zeros((n, 3)), np.full(n, dt))
    return pim


# ------------------------------------------------------------------ LiDAR
def test_lidar_zero_at_consistent_pose(rng):
    ext = js.random_extrinsics(rng)
    x = random_state(rng)
    m = LidarPoseMeasurement(0, x.pose * ext.T_IL, np.eye(6))
    assert np.allclose(lidar_residual(x, m, ext).residual, 0, atol=1e-12)


def test_lidar_pure_translation():
    x = NavState(Pose3(Rot3.identity(), np.array([1.0, 0.0, 0.0])))
    m = LidarPoseMeasurement(0, Pose3.identity(), np.eye(6))
    r = lidar_residual(x, m, Extrinsics())
    assert np.allclose(r.residual, [0, 0, 0, 1, 0, 0], atol=1e-15)


def test_lidar_touches_pose_only(rng):
    ext = js.random_extrinsics(rng)
    r = lidar_residual(random_state(rng), LidarPoseMeasurement(0, random_pose(rng), np.eye(6)), ext)
    assert set(r.jacobians) == {"x_i"}
    assert np.all(r.jacobians["x_i"][:, 6:] == 0)


def test_lidar_whitening_uses_imu_frame_covariance(rng):
    ext = js.random_extrinsics(rng)
    A = rng.normal(size=(6, 6))
    m = LidarPoseMeasurement(0, random_pose(rng), A @ A.T + np.eye(6))
    r = lidar_residual(random_state(rng), m, ext)
    W = r.sqrt_info
    # W^T W is the inverse of the residual covariance: the LiDAR-frame noise
    # seen through the adjoint of T_IL
    Ad = se3_adjoint(ext.T_IL.R, ext.T_IL.t)
    assert np.allclose(W.T @ W, np.linalg.inv(Ad @ m.cov @ Ad.T), rtol=1e-9, atol=1e-12)
    assert np.allclose(r.whitened, W @ r.residual)
    assert r.loss == pytest.approx(0.5 * r.whitened @ r.whitened)


# ------------------------------------------------------------------ IMU
def test_imu_stationary_pair_is_zero():
    x = NavState()
    r = imu_residual(x, NavState(), DOWN, stationary_pim())
    assert np.max(np.abs(r.residual)) < 1e-9


def test_imu_equal_biases_give_zero_bias_rows(rng):
    xi = random_state(rng)
    xj = random_state(rng)
    xj.bias = ImuBias(xi.bias.accel.copy(), xi.bias.gyro.copy())
    r = imu_residual(xi, xj, random_gravity(rng), js.random_pim(rng))
    assert np.array_equal(r.residual[9:], np.zeros(6))


def test_imu_rejects_empty_interval():
    with pytest.raises(ValueError):
        imu_residual(NavState(), NavState(), DOWN, PreintegratedImu())


def test_imu_zero_at_exactly_integrated_states(rng):
    worst = 0.0
    for _ in range(100):
        xi = random_state(rng)
        g = random_gravity(rng)
        pim = js.random_pim(rng)
        Rj, vj = predict_at(pim, xi, g.vector)
        pj = predict_position(pim, xi, g.vector)
        xj = NavState(Pose3(Rot3(Rj), pj), vj, xi.bias)
        worst = max(worst, np.max(np.abs(imu_residual(xi, xj, g, pim).residual)))
    assert worst <= 1e-6


def test_imu_residual_at_ground_truth(curved):
    model, rig, buf = curved
    for t in np.arange(0.5, 5.5, 0.25):
        ti, tj = int(round(t * NS)), int(round((t + 0.1) * NS))
        pim = buf.preintegrate(ti, tj, ImuBias(), rig.imu_noise)
        r = imu_residual(truth_state(model, ti / NS), truth_state(model, tj / NS), DOWN, pim)
        assert np.max(np.abs(r.residual)) <= 1e-4


def test_imu_whitening_blocks(rng):
    noise = ImuNoiseParams()
    pim = js.random_pim(rng)
    r = imu_residual(random_state(rng), random_state(rng), random_gravity(rng), pim, noise)
    info = r.sqrt_info.T @ r.sqrt_info
    cov = np.linalg.inv(info)
    order = np.r_[0:3, 6:9, 3:6]
    assert np.allclose(cov[:9, :9], pim.cov[np.ix_(order, order)], rtol=1e-8, atol=1e-16)
    assert np.allclose(cov[9:12, 9:12], np.eye(3) * noise.accel_bias_rw ** 2 * pim.dt)
    assert np.allclose(cov[12:, 12:], np.eye(3) * noise.gyro_bias_rw ** 2 * pim.dt)
    assert np.allclose(cov[:9, 9:], 0, atol=1e-20)


# ------------------------------------------------------------------ radar
def test_radar_point_residual_examples():
    assert radar_point_residual(np.zeros(3), np.array([1.0, 0, 0]), 0.0) == 0.0
    assert radar_point_residual(np.array([1.0, 0, 0]), np.array([1.0, 0, 0]), -1.0) == 0.0
    assert radar_point_residual(np.array([1.0, 0, 0]), np.array([0.0, 1, 0]), 0.0) == 0.0


def test_radar_ego_velocity_examples(rng):
    ext = js.random_extrinsics(rng)
    bg = rng.normal(size=3)
    assert np.allclose(radar_ego_velocity(random_pose(rng).R, np.zeros(3), bg, bg, ext), 0)
    ext = Extrinsics(Pose3.identity(), Pose3(Rot3.identity(), np.array([0.0, 1.0, 0.0])))
    vR = radar_ego_velocity(np.eye(3), np.zeros(3), np.zeros(3), np.array([0, 0, 1.0]), ext)
    assert np.allclose(vR, [-1, 0, 0], atol=1e-15)
    assert radar_point_residual(vR, np.array([1.0, 0, 0]), 1.0) == 0.0


def ground_truth_scan(model, rig, buf, t: float, rng, n: int = 20) -> RadarScan:
    ext = rig.extrinsics
    pose, v, _, w = sample_ground_truth(model, t)
    vR = radar_ego_velocity(pose.R, v, np.zeros(3), w, ext)
    mu = rng.normal(size=(n, 3))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    return RadarScan(int(round(t * NS)), mu, -mu @ vR, buf.gyro_at(int(round(t * NS))))


def test_radar_baseline_zero_at_ground_truth(curved, rng):
    model, rig, buf = curved
    for t in (1.0, 2.5, 4.0):
        scan = ground_truth_scan(model, rig, buf, t, rng)
        r = radar_factor_baseline(truth_state(model, t), scan, rig.extrinsics, SIGMA_R)
        assert np.max(np.abs(r.residual)) <= 1e-10


def test_radar_baseline_outlier_loss_is_robust():
    ext = Extrinsics()
    mu = np.eye(3)
    scan = RadarScan(0, mu, np.array([0.0, 0.0, 10 * HUBER_DELTA * SIGMA_R]), np.zeros(3))
    r = radar_factor_baseline(NavState(), scan, ext, SIGMA_R)
    d = HUBER_DELTA
    assert abs(r.whitened[2]) < abs(r.residual[2] / SIGMA_R)
    assert r.loss == pytest.approx(d * (10 * d - d / 2), rel=1e-12)
    assert r.loss < 50 * d * d
    assert r.weights[2] == pytest.approx(0.1)


def test_radar_baseline_empty_scan():
    scan = RadarScan(0, np.zeros((0, 3)), np.zeros(0), np.zeros(3))
    r = radar_factor_baseline(NavState(), scan, Extrinsics(), SIGMA_R)
    assert r.residual.shape == (0,) and r.jacobians["x_i"].shape == (0, 15) and r.loss == 0.0


def test_radar_baseline_jacobian_sparsity(rng):
    r = radar_factor_baseline(random_state(rng), js.random_scan(rng), js.random_extrinsics(rng),
                              SIGMA_R)
    J = r.jacobians["x_i"]
    assert set(r.jacobians) == {"x_i"}
    assert np.all(J[:, 3:6] == 0) and np.all(J[:, 9:12] == 0)


def test_radar_preintegrated_empty_pim_matches_baseline(rng):
    x, ext, scan = random_state(rng), js.random_extrinsics(rng), js.random_scan(rng)
    pre = radar_factor_preintegrated(x, random_gravity(rng), PreintegratedImu(), scan, ext, SIGMA_R)
    base = radar_factor_baseline(x, scan, ext, SIGMA_R)
    assert np.allclose(pre.residual, base.residual, rtol=0, atol=1e-12)
    assert np.all(pre.sqrt_info == 1.0 / SIGMA_R)


def test_radar_preintegrated_stationary_is_zero():
    ext = Extrinsics(Pose3.identity(), Pose3(Rot3.identity(), np.array([0.1, 0.2, 0.0])))
    mu = np.eye(3)
    scan = RadarScan(int(0.1 * NS), mu, np.zeros(3), np.zeros(3))
    r = radar_factor_preintegrated(NavState(), DOWN, stationary_pim(), scan, ext, SIGMA_R)
    assert np.max(np.abs(r.residual)) < 1e-12


def test_radar_preintegrated_at_ground_truth_50ms(curved, rng):
    model, rig, buf = curved
    for t in np.arange(0.5, 5.5, 0.5):
        ti, tr = int(round(t * NS)), int(round((t + 0.05) * NS))
        pim = buf.preintegrate(ti, tr, ImuBias(), rig.imu_noise)
        scan = ground_truth_scan(model, rig, buf, tr / NS, rng)
        r = radar_factor_preintegrated(truth_state(model, t), DOWN, pim, scan, rig.extrinsics,
                                       SIGMA_R, t_i=ti)
        assert np.max(np.abs(r.residual)) <= 1e-3


def test_radar_preintegrated_rejects_span_mismatch(rng):
    pim = js.random_pim(rng, 0.05)
    scan = js.random_scan(rng)
    scan.t = int(0.2 * NS)
    with pytest.raises(ValueError):
        radar_factor_preintegrated(random_state(rng), DOWN, pim, scan, Extrinsics(), SIGMA_R, t_i=0)


def test_radar_preintegrated_variance_exceeds_measurement_variance(rng):
    pim = js.random_pim(rng, 0.08)
    r = radar_factor_preintegrated(random_state(rng), random_gravity(rng), pim,
                                   js.random_scan(rng), js.random_extrinsics(rng), SIGMA_R)
    var = 1.0 / r.sqrt_info ** 2
    assert np.all(var > SIGMA_R ** 2)


@given(st.integers(0, 2**32 - 1))
def test_baseline_equivalence_property(seed):
    rng = np.random.default_rng(seed)
    x, ext = random_state(rng), js.random_extrinsics(rng)
    scan = js.random_scan(rng, int(rng.integers(1, 40)))
    pim = PreintegratedImu(bias_lin=ImuBias(rng.normal(0, 0.1, 3), rng.normal(0, 0.01, 3)))
    pre = radar_factor_preintegrated(x, random_gravity(rng), pim, scan, ext, SIGMA_R, t_i=scan.t)
    base = radar_factor_baseline(x, scan, ext, SIGMA_R)
    assert np.max(np.abs(pre.residual - base.residual)) <= 1e-12
    assert np.max(np.abs(pre.jacobians["x_i"] - base.jacobians["x_i"])) <= 1e-12
    assert np.max(np.abs(pre.whitened - base.whitened)) <= 1e-12
    assert np.all(pre.jacobians["gravity"] == 0)


# ------------------------------------------------------------------ prior
def test_prior_zero_at_linearization_point(rng):
    prior = js.random_prior(rng)
    x = NavState(prior.pose, prior.velocity, prior.bias)
    r = prior_residual(x, GravityVar(prior.gravity), prior)
    assert r.residual.shape == (17,)
    assert np.allclose(r.residual, 0, atol=1e-14)
    assert r.jacobians["gravity"].shape == (17, 2)


def test_prior_gravity_row_only_sees_gravity(rng):
    prior = js.random_prior(rng)
    x = random_state(rng)
    r = prior_residual(x, GravityVar(prior.gravity), prior)
    assert np.allclose(r.residual[15:], 0, atol=1e-14)
    r = prior_residual(NavState(prior.pose, prior.velocity, prior.bias), random_gravity(rng), prior)
    assert np.allclose(r.residual[:15], 0, atol=1e-14) and np.linalg.norm(r.residual[15:]) > 0


def test_prior_whitening(rng):
    prior = js.random_prior(rng)
    assert np.allclose(prior.sqrt_info.T @ prior.sqrt_info, prior.information, rtol=1e-10)
    r = prior_residual(random_state(rng), random_gravity(rng), prior)
    assert r.loss == pytest.approx(0.5 * r.residual @ prior.information @ r.residual, rel=1e-9)


def test_prior_rejects_indefinite_information(rng):
    xp = random_state(rng)
    with pytest.raises(ValueError):
        PriorFactor(xp.pose, xp.velocity, xp.bias, DOWN.direction, -np.eye(17))


def test_prior_from_covariance_round_trip(rng):
    A = rng.normal(size=(17, 17))
    cov = A @ A.T + np.eye(17)
    xp = random_state(rng)
    p = PriorFactor.from_covariance(xp.pose, xp.velocity, xp.bias, DOWN.direction, cov)
    assert np.allclose(p.covariance, cov, rtol=1e-8)


# ------------------------------------------------------------------ Huber
def test_huber_weight_examples():
    d = HUBER_DELTA
    assert huber_weight(0.0) == 1.0
    assert huber_weight(d) == 1.0
    assert huber_weight(2 * d) == pytest.approx(0.5)
    assert huber_weight(-2 * d) == pytest.approx(0.5)


@given(st.floats(-1e3, 1e3))
def test_huber_weight_in_unit_interval_and_loss_continuous(r):
    w = float(huber_weight(r))
    assert 0 < w <= 1
    assert float(huber_loss(r)) <= 0.5 * r * r + 1e-12


def test_huber_loss_matches_quadratic_inside():
    r = np.linspace(-HUBER_DELTA, HUBER_DELTA, 11)
    assert np.allclose(huber_loss(r), 0.5 * r ** 2)


# ------------------------------------------------------------------ Jacobians
@pytest.mark.parametrize("name", list(js.CHECKS))
def test_jacobians_match_central_differences(name):
    worst = js.CHECKS[name](np.random.default_rng(2024), 100)
    assert worst < js.TOL, f"{name}: worst relative error {worst:.2e}"


# ------------------------------------------------------------------ gauge
def random_world(rng) -> Pose3:
    return random_pose(rng, 20.0)


def transformed(x: NavState, W: Pose3) -> NavState:
    return NavState(W * x.pose, W.R @ x.velocity, x.bias)


def test_lidar_gauge_invariance(rng):
    for _ in range(50):
        W = random_world(rng)
        x, ext = random_state(rng), js.random_extrinsics(rng)
        m = LidarPoseMeasurement(0, random_pose(rng), np.eye(6))
        mW = LidarPoseMeasurement(0, W * m.pose, m.cov)
        a = lidar_residual(x, m, ext).residual
        b = lidar_residual(transformed(x, W), mW, ext).residual
        assert np.max(np.abs(a - b)) <= 1e-10


def test_imu_gauge_invariance(rng):
    for _ in range(50):
        W = random_world(rng)
        xi, xj, g = random_state(rng), random_state(rng), random_gravity(rng)
        pim = js.random_pim(rng)
        a = imu_residual(xi, xj, g, pim).residual
        b = imu_residual(transformed(xi, W), transformed(xj, W),
                         GravityVar(W.R @ g.direction, g.magnitude), pim).residual
        assert np.max(np.abs(a - b)) <= 1e-10


def test_radar_gauge_invariance(rng):
    for _ in range(50):
        W = random_world(rng)
        x, g, ext = random_state(rng), random_gravity(rng), js.random_extrinsics(rng)
        scan = js.random_scan(rng)
        gW = GravityVar(W.R @ g.direction, g.magnitude)
        a = radar_factor_baseline(x, scan, ext, SIGMA_R).residual
        b = radar_factor_baseline(transformed(x, W), scan, ext, SIGMA_R).residual
        assert np.max(np.abs(a - b)) <= 1e-10
        pim = js.random_pim(rng, 0.05)
        a = radar_factor_preintegrated(x, g, pim, scan, ext, SIGMA_R).residual
        b = radar_factor_preintegrated(transformed(x, W), gW, pim, scan, ext, SIGMA_R).residual
        assert np.max(np.abs(a - b)) <= 1e-10


def test_factors_are_pure(rng):
    x, g = random_state(rng), random_gravity(rng)
    pim = js.random_pim(rng)
    before = (x.pose.R.copy(), x.velocity.copy(), g.direction.copy(), pim.dR.copy())
    r1 = imu_residual(x, x.retract(rng.normal(0, 0.1, 15)), g, pim)
    r2 = imu_residual(x, x.retract(np.zeros(15)), g, pim)
    assert not np.allclose(r1.residual, r2.residual)
    after = (x.pose.R, x.velocity, g.direction, pim.dR)
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
