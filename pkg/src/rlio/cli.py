"""Command line entry point: ``rlio simulate | run | eval``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, parse_config
from .metrics import ASSOC_TOLERANCE_NS, compute_ate, compute_rte_per_meter
from .simulator import ground_truth_trajectory, read_tum, simulate, write_stream, write_tum
from .smoother import NodePolicy

STREAM_FILE = "streams.txt"

EVAL_DESCRIPTION = f"""\
Score estimated TUM trajectories against a ground-truth TUM trajectory.

Each estimated pose is paired with the nearest ground-truth stamp; pairs more
than {ASSOC_TOLERANCE_NS / 1e6:g} ms apart are dropped.  ATE is the mean and standard
deviation of position error after a rigid (rotation + translation, no scale)
least-squares alignment of the paired positions; --no-align skips it.  RTE is
the translation error over consecutive 1 m segments of ground-truth path, each
expressed in its segment start frame (alignment-free).

Either give --gt and one or more --est files, or give --out pointing at a
`run` output directory, which scores every traj_<policy>.tum in it against
its groundtruth.tum.
"""


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    data = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "policy", None):
        data["policies"] = args.policy
    if getattr(args, "out", None):
        data["out"] = args.out
    if getattr(args, "streams", None):
        data["streams"] = args.streams
    if getattr(args, "threaded", False):
        data["threaded"] = True
    return ExperimentConfig.from_dict(data)


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    model, rig = cfg.trajectory_model(), cfg.sensor_rig()
    streams = simulate(model, rig, cfg.degeneracy_profile(), seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_stream(out / STREAM_FILE, streams)
    write_tum(out / "groundtruth.tum", ground_truth_trajectory(model, rig.imu_rate))
    (out / "config.yaml").write_text(cfg.dump())
    print(f"wrote {len(streams.imu)} IMU, {len(streams.lidar)} LiDAR and "
          f"{len(streams.radar)} radar records to {out / STREAM_FILE}")
    return 0


def cmd_run(args) -> int:
    from .bench import run_experiment

    cfg = _load_config(args)
    report = run_experiment(cfg)
    print(report.table())
    print(f"results written to {cfg.out}")
    return 0


def cmd_eval(args) -> int:
    if args.gt:
        if not args.est:
            raise ConfigError("eval: --gt needs at least one --est file")
        gt_path = Path(args.gt)
        pairs = [(Path(p).stem, Path(p)) for p in args.est]
    elif args.out:
        out = Path(args.out)
        gt_path = out / "groundtruth.tum"
        pairs = [(p.stem[len("traj_"):], p) for p in sorted(out.glob("traj_*.tum"))]
        if args.policy:
            pairs = [(n, p) for n, p in pairs if n in args.policy]
        if not pairs:
            raise ConfigError(f"eval: no traj_<policy>.tum files in {out}")
    else:
        raise ConfigError("eval: give --gt with --est, or --out with a run directory")
    if not gt_path.is_file():
        raise ConfigError(f"eval: ground truth not found: {gt_path}")
    gt = read_tum(gt_path)
    print(f"{'trajectory':<20} {'ate_mean_m':>12} {'ate_std_m':>12} {'rte_mean_m':>12} {'rte_std_m':>12}")
    for name, path in pairs:
        est = read_tum(path)
        ate = compute_ate(est, gt, align=not args.no_align)
        try:
            rte = compute_rte_per_meter(est, gt)
            rte_s = f"{rte[0]:>12.6g} {rte[1]:>12.6g}"
        except ValueError:
            rte_s = f"{'n/a':>12} {'n/a':>12}"
        print(f"{name:<20} {ate[0]:>12.6g} {ate[1]:>12.6g} {rte_s}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlio", description="Radar-LiDAR-inertial smoother benchmark.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress messages")
    sub = parser.add_subparsers(dest="command", required=True)
    policies = [p.value for p in NodePolicy]

    def common(p):
        p.add_argument("--config", help="experiment YAML file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides the config)")

    p = sub.add_parser("simulate", help="generate sensor streams and ground truth")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the smoother policies and write metrics")
    common(p)
    p.add_argument("--policy", action="append", choices=policies,
                   help="policy to run (repeatable; default: all)")
    p.add_argument("--streams", help="replay a stream file written by `simulate`")
    p.add_argument("--threaded", action="store_true",
                   help="run policies concurrently (timings are marked contended)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="compute ATE and RTE of TUM trajectories",
                       description=EVAL_DESCRIPTION,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--gt", help="ground-truth TUM file")
    p.add_argument("--est", action="append", help="estimated TUM file (repeatable)")
    p.add_argument("--out", help="`run` output directory to score")
    p.add_argument("--policy", action="append", choices=policies,
                   help="with --out, restrict to these policies")
    p.add_argument("--no-align", action="store_true", help="skip rigid alignment for ATE")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
