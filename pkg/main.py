#!/usr/bin/env python3
"""msodom - sliding-window visual-inertial odometry. Commands: odometry, simulate, evaluate."""
import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

from core.config import default_config_path, load_config, save_config
from core.dataset import Dataset, read_trajectory_tum, write_trajectory_tum
from core.errors import OdometryError
from core.evaluation import ate_rmse, default_segment_lengths, rpe
from core.logging import LinuxLogger, get_logger
from core.pipeline import run_odometry, write_report
from core.sim import SCENARIOS, make_scenario

logger = get_logger(__name__)

MODES = ("stereo", "mono-imu", "stereo-imu")


def cmd_odometry(args: argparse.Namespace) -> int:
    config_path = Path(args.config) if args.config else default_config_path()
    config = load_config(config_path)
    if args.mode:
        config = config.with_mode(args.mode)
    dataset = Dataset.load(args.dataset, config.mode, config.rig)
    trajectory, report, _ = run_odometry(config, dataset)
    output = Path(args.output)
    write_trajectory_tum(output, trajectory)
    report_path = Path(args.report) if args.report else output.with_suffix(".json")
    write_report(report_path, report)
    print(
        f"{report.frames} frames ({report.keyframes} keyframes) in {report.runtime_s:.2f} s, "
        f"mean iterations {report.mean_iterations:.2f}, rejected outliers {report.rejected_outliers}"
    )
    print(f"Trajectory: {output}")
    print(f"Report: {report_path}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = make_scenario(args.scenario, seed=args.seed, frames=args.frames)
    stream = scenario.imu()
    world = scenario.world
    dataset = Dataset(
        frames=scenario.features(),
        imu=stream.samples,
        ground_truth=scenario.ground_truth(),
        metadata={
            "scenario": scenario.name,
            "seed": str(args.seed),
            "imu_rate": repr(world.imu_rate),
            "camera_rate": repr(world.camera_rate),
            "sigma_px": repr(world.sigma_px),
        },
        camera_count=len(world.rig),
    )
    output = Path(args.output)
    dataset.save(output)
    save_config(scenario.config(), output / "estimator.ini")
    print(
        f"Wrote {len(dataset.frames)} frames, {len(dataset.imu)} IMU samples "
        f"({scenario.name}, seed {args.seed}) to {output}"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    est = read_trajectory_tum(args.est)
    gt = read_trajectory_tum(args.gt)
    ate = ate_rmse(est, gt, align=not args.no_align, with_scale=args.with_scale, max_dt=args.max_dt)
    print(f"ATE RMSE [m]: {ate:.6f}")

    lengths = args.rpe_lengths or default_segment_lengths(gt)
    bins = rpe(est, gt, lengths, max_dt=args.max_dt)
    est_path = Path(args.est)
    rpe_path = Path(args.rpe_output) if args.rpe_output else est_path.with_name(est_path.stem + "_rpe.csv")
    with open(rpe_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["length_m", "translation_pct", "rotation_deg_per_m", "count", "valid"])
        for b in bins:
            writer.writerow(
                [f"{b.length:.6f}", f"{b.translation_pct:.6f}", f"{b.rotation_deg_per_m:.6f}", b.count, int(b.valid)]
            )
    print(f"{'length [m]':>12} {'trans [%]':>12} {'rot [deg/m]':>12} {'segments':>9}")
    for b in bins:
        print(f"{b.length:12.3f} {b.translation_pct:12.4f} {b.rotation_deg_per_m:12.4f} {b.count:9d}")
    print(f"RPE table: {rpe_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msodom", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("odometry", parents=[common], help="run the estimator over a dataset")
    p.add_argument("--config", help=f"estimator INI (default {default_config_path()})")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--output", required=True, help="TUM trajectory to write")
    p.add_argument("--mode", choices=MODES, help="override the configured sensor mode")
    p.add_argument("--report", help="JSON run report (default: output with .json suffix)")
    p.set_defaults(func=cmd_odometry)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--scenario", choices=SCENARIOS, default="circle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--output", required=True, help="dataset directory to create")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", parents=[common], help="ATE and RPE against ground truth")
    p.add_argument("--est", required=True, help="estimated TUM trajectory")
    p.add_argument("--gt", required=True, help="ground-truth TUM trajectory")
    p.add_argument("--rpe-lengths", type=float, nargs="+", metavar="M", help="segment lengths in meters")
    p.add_argument("--rpe-output", help="RPE CSV (default: <est>_rpe.csv)")
    p.add_argument("--with-scale", action="store_true", help="similarity alignment")
    p.add_argument("--no-align", action="store_true", help="compare in the estimate's frame")
    p.add_argument("--max-dt", type=float, default=0.01, help="association window [s]")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    LinuxLogger()
    if args.verbose:
        LinuxLogger.set_level(logging.DEBUG)
    try:
        return args.func(args)
    except OdometryError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        logger.error("%s failed", args.command, exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
