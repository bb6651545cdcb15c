"""Experiment runner: every policy over the same streams, with accuracy and timing metrics."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .factors import NavState
from .metrics import compute_ate, compute_rte_per_meter
from .preintegration import NS, ImuBias
from .simulator import (SensorRig, Streams, Trajectory, TrajectoryModel, ground_truth_trajectory,
                        read_stream, sample_ground_truth, simulate, write_tum)
from .smoother import NodePolicy, OptimizerSettings, Smoother, SolveReport

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["policy", "ate_mean_m", "ate_std_m", "rte_mean_m", "rte_std_m", "total_opt_s",
                  "avg_per_100ms_ms", "per_iter_ms", "nodes_steady_state", "optimize_calls"]
TICK_S = 0.1


@dataclass
class PolicyResult:
    policy: str
    failed: bool
    ate: tuple | None
    rte: tuple | None
    total_opt_s: float
    avg_per_100ms_ms: float
    per_iter_ms: float
    nodes_steady_state: int
    optimize_calls: int
    process_s: float
    process_cpu_s: float
    iterations: int
    dropped_radar: int
    reports: list = field(repr=False, default_factory=list)
    trajectory: Trajectory | None = field(repr=False, default=None)

    def row(self) -> dict:
        def pair(v):
            if self.failed or v is None:
                return "Failed", "Failed"
            return f"{v[0]:.6g}", f"{v[1]:.6g}"
        ate, rte = pair(self.ate), pair(self.rte)
        return {
            "policy": self.policy,
            "ate_mean_m": ate[0],
            "ate_std_m": ate[1],
            "rte_mean_m": rte[0],
            "rte_std_m": rte[1],
            "total_opt_s": f"{self.total_opt_s:.6g}",
            "avg_per_100ms_ms": f"{self.avg_per_100ms_ms:.6g}",
            "per_iter_ms": f"{self.per_iter_ms:.6g}",
            "nodes_steady_state": str(self.nodes_steady_state),
            "optimize_calls": str(self.optimize_calls),
        }


@dataclass
class MetricsReport:
    results: dict
    duration: float
    contended: bool = False

    def __getitem__(self, policy) -> PolicyResult:
        return self.results[NodePolicy(policy).value]

    def rows(self) -> list[dict]:
        return [r.row() for r in self.results.values()]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            w.writeheader()
            w.writerows(self.rows())

    def table(self) -> str:
        rows = self.rows()
        widths = {c: max(len(c), *(len(r[c]) for r in rows)) for c in METRIC_COLUMNS}
        lines = ["  ".join(c.ljust(widths[c]) for c in METRIC_COLUMNS)]
        lines += ["  ".join(r[c].ljust(widths[c]) for c in METRIC_COLUMNS) for r in rows]
        if self.contended:
            lines.append("(timings contended: policies ran concurrently)")
        return "\n".join(lines)


def initial_state(model: TrajectoryModel, streams: Streams, bootstrap_s: float) -> NavState:
    """Ground-truth pose and velocity at the LiDAR stamp the smoother will anchor on.

    The bias is left at zero: it is not something a real system would know.
    """
    t0 = streams.imu[0].t + int(round(bootstrap_s * NS))
    first = next((m.t for m in streams.lidar if m.t >= t0), None)
    if first is None:
        raise ValueError("no LiDAR measurement after the bootstrap interval")
    pose, v, _, _ = sample_ground_truth(model, first / NS)
    return NavState(pose, v, ImuBias())


def run_policy(policy, streams: Streams, rig: SensorRig, lag: float = 2.5,
               settings: OptimizerSettings | None = None, init: NavState | None = None,
               duration: float | None = None, gt: Trajectory | None = None) -> PolicyResult:
    """Feed one smoother the merged streams and collect metrics."""
    policy = NodePolicy(policy)
    sm = Smoother(policy, rig.extrinsics, rig.imu_noise, lag=lag, sigma_r=rig.sigma_r,
                  settings=settings, gravity_magnitude=rig.gravity)
    if init is not None:
        sm.set_initial_state(init)
    ts, ps, Rs = [], [], []
    start, cpu_start = time.perf_counter_ns(), time.thread_time_ns()
    for kind, msg in streams.merged():
        if kind == 0:
            sm.add_imu(msg)
            if sm.num_nodes:
                x = sm.propagate_output(msg.t)
                ts.append(msg.t)
                ps.append(x.pose.t)
                Rs.append(x.pose.R)
        elif kind == 1:
            sm.add_lidar(msg)
        else:
            sm.add_radar(msg)
        if sm.failed:
            log.warning("%s diverged at t=%.3f s; marking as Failed", policy.value, msg.t / NS)
            break
    process_s = (time.perf_counter_ns() - start) / NS
    process_cpu_s = (time.thread_time_ns() - cpu_start) / NS

    reports: list[SolveReport] = sm.reports
    total = sum(r.wall_ns for r in reports) / NS
    iters = sum(r.iterations for r in reports)
    iter_s = sum(sum(r.iter_ns) for r in reports) / NS
    if duration is None:
        duration = (streams.imu[-1].t - streams.imu[0].t) / NS
    ticks = max(1, math.ceil(duration / TICK_S - 1e-9))
    traj = Trajectory(np.array(ts, dtype=np.int64), np.array(ps).reshape(-1, 3),
                      np.array(Rs).reshape(-1, 3, 3))
    ate = rte = None
    if not sm.failed and gt is not None and len(traj) >= 2:
        ate = compute_ate(traj, gt, align=True)
        try:
            rte = compute_rte_per_meter(traj, gt)
        except ValueError as exc:
            log.warning("RTE unavailable for %s: %s", policy.value, exc)
    return PolicyResult(
        policy=policy.value, failed=sm.failed, ate=ate, rte=rte, total_opt_s=total,
        avg_per_100ms_ms=1e3 * total / ticks,
        per_iter_ms=1e3 * iter_s / iters if iters else 0.0,
        nodes_steady_state=reports[-1].nodes if reports else 0,
        optimize_calls=len(reports), process_s=process_s,
        process_cpu_s=process_cpu_s, iterations=iters,
        dropped_radar=sm.dropped_radar, reports=reports, trajectory=traj)


def walltime_series(result: PolicyResult, t0_ns: int, duration: float) -> list[tuple]:
    """Per 100 ms tick: (tick start s, optimization wall time ms, solves, iterations)."""
    ticks = max(1, math.ceil(duration / TICK_S - 1e-9))
    wall = np.zeros(ticks)
    solves = np.zeros(ticks, dtype=int)
    iters = np.zeros(ticks, dtype=int)
    for r in result.reports:
        k = min(ticks - 1, max(0, int((r.t - t0_ns) / NS // TICK_S)))
        wall[k] += r.wall_ns / 1e6
        solves[k] += 1
        iters[k] += r.iterations
    return [(round(k * TICK_S, 6), wall[k], solves[k], iters[k]) for k in range(ticks)]


def load_streams(cfg: ExperimentConfig, model: TrajectoryModel, rig: SensorRig) -> Streams:
    if cfg.streams:
        s = read_stream(cfg.streams)
        s.model = model
        return s
    return simulate(model, rig, cfg.degeneracy_profile(), seed=cfg.seed)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> MetricsReport:
    """Run every configured policy on identical streams; optionally write artifacts to ``cfg.out``."""
    model = cfg.trajectory_model()
    rig = cfg.sensor_rig()
    settings = cfg.optimizer_settings()
    streams = load_streams(cfg, model, rig)
    gt = ground_truth_trajectory(model, rig.imu_rate)
    init = initial_state(model, streams, 0.5) if cfg.initial_state == "ground_truth" else None
    duration = model.duration

    def one(policy):
        return run_policy(policy, streams, rig, cfg.lag, settings, init, duration, gt)

    if cfg.threaded and len(cfg.policies) > 1:
        with ThreadPoolExecutor(max_workers=len(cfg.policies)) as pool:
            results = list(pool.map(one, cfg.policies))
    else:
        results = [one(p) for p in cfg.policies]
    report = MetricsReport({r.policy: r for r in results}, duration,
                           contended=cfg.threaded and len(cfg.policies) > 1)
    if write:
        write_artifacts(cfg, report, gt, streams.imu[0].t)
    return report


def write_artifacts(cfg: ExperimentConfig, report: MetricsReport, gt: Trajectory,
                    t0_ns: int) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    write_tum(out / "groundtruth.tum", gt)
    for name, r in report.results.items():
        if r.trajectory is not None and len(r.trajectory):
            write_tum(out / f"traj_{name}.tum", r.trajectory)
        with open(out / f"walltime_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick_start_s", "wall_ms", "solves", "iterations"])
            for t, ms, n, it in walltime_series(r, t0_ns, report.duration):
                w.writerow([f"{t:.1f}", f"{ms:.6g}", n, it])
    (out / "config.yaml").write_text(cfg.dump())
    return out
