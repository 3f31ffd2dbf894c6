# main.py
"""Command-line entry point: run, sweep, angle and estimate-time."""

import argparse
import logging
import os
import sys

from dotenv import load_dotenv

from experiment_config import SWEEP_AXES, ConfigError, load_config
from experiments import ANGLE_CHECKPOINTS, angle_experiment, run, sweep
from gradient_oracle import UndefinedAngleError
from hardware_estimate import DEFAULT_OVERHEAD_FACTOR, estimate_table, estimate_time, format_duration
from mgd_trainer import TrainingAborted
from network_core import ShapeError
from tasks_data import DataFormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTED = 3


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgd", description="Multiplexed gradient descent simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="run only this seed")
        p.add_argument("--out", default=None, help="output directory (default: config or MGD_OUTPUT_DIR)")
        p.add_argument("--stride", type=int, default=None, help="trace recording stride in steps")

    add_common(sub.add_parser("run", help="train every seed of a config"))

    p_sweep = sub.add_parser("sweep", help="one ensemble per value of a hyperparameter")
    add_common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p_sweep.add_argument("--values", required=True, type=_float_list, help="e.g. 0.5,1,2,4")

    p_angle = sub.add_parser("angle", help="angle between accumulated G and the true gradient")
    add_common(p_angle)
    p_angle.add_argument("--checkpoints", type=_float_list,
                         default=list(ANGLE_CHECKPOINTS), help="steps at which to measure, e.g. 100,1000,10000")

    p_est = sub.add_parser("estimate-time", help="project step counts onto hardware time")
    p_est.add_argument("--steps", type=float, help="number of tau_p periods")
    p_est.add_argument("--tau-p", type=float, help="perturbation period in seconds")
    p_est.add_argument("--overhead", type=float, default=DEFAULT_OVERHEAD_FACTOR)
    p_est.add_argument("--table", action="store_true", help="print the hardware/benchmark table")
    return parser


def _estimate(args) -> int:
    if args.table or args.steps is None or args.tau_p is None:
        for row in estimate_table(overhead_factor=args.overhead):
            print(f"{row['hardware']:<4} {row['task']:<14} {row['steps']:>10.0e} steps  {row['display']}")
        return EXIT_OK
    seconds = estimate_time(args.steps, args.tau_p, args.overhead)
    print(f"{seconds!r} s ({format_duration(seconds)})")
    return EXIT_OK


def main(argv=None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("MGD_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)

    if args.command == "estimate-time":
        try:
            return _estimate(args)
        except ValueError as e:
            print(f"❌ {e}", file=sys.stderr)
            return EXIT_CONFIG

    try:
        config = load_config(args.config)
        if args.stride is not None:
            config = config.with_overrides(record_stride=args.stride)
        seeds = None if args.seed is None else [args.seed]
        out_dir = args.out or config.output_dir

        if args.command == "run":
            record = run(config, out_dir, seeds=seeds)
            print(f"✅ {len(record.seeds)} seed(s): converged {record.converged_fraction:.0%}, "
                  f"median time {record.median_time}, median accuracy {record.median_final_accuracy:.3f}")
            print(f"Results written to {out_dir}")
        elif args.command == "sweep":
            result = sweep(config, args.axis, args.values, out_dir, seeds=seeds)
            for value, record in result.rows:
                print(f"{args.axis}={value:g}: converged {record.converged_fraction:.0%}, "
                      f"median time {record.median_time}")
            if args.axis == "eta":
                print(f"Max eta (>= 50% converged): {result.max_eta}")
        else:
            checkpoints = [int(c) for c in args.checkpoints]
            for row in angle_experiment(config, checkpoints, out_dir, seeds=seeds):
                print(f"step {row.step}: median {row.median:.1f} deg (q1 {row.q1:.1f}, q3 {row.q3:.1f})")
    except ConfigError as e:
        print(f"❌ Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, ShapeError, OSError) as e:
        print(f"❌ Data error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except UndefinedAngleError as e:
        print(f"❌ Angle error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as e:
        print(f"❌ Training aborted: {e}", file=sys.stderr)
        return EXIT_ABORTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
