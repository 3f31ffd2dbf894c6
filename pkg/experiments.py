"""
experiments.py
Seed ensembles, hyperparameter sweeps and the gradient-angle protocol, with their CSV outputs.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from experiment_config import ExperimentConfig, parse_config
from file_store import atomic_write_text
from gradient_oracle import angle_between, backprop_grad
from imperfections import IDEAL
from mgd_trainer import (
    ClockConfig,
    Mode,
    NetworkObjective,
    TrainingAborted,
    TrainingTrace,
    discrete_step,
    init_state,
    train,
)
from network_core import accuracy, init_params

logger = logging.getLogger(__name__)

SUMMARY_HEADER = ("seed", "converged", "time_to_threshold", "final_accuracy", "final_cost")
ENSEMBLE_HEADER = ("converged_fraction", "median_time", "q1_time", "q3_time", "median_final_accuracy")
ANGLE_CHECKPOINTS = (100, 1000, 10000)
MIN_CONVERGED_FRACTION = 0.5


# ── Records ──────────────────────────────────────────────────────────────────

@dataclass
class SeedResult:
    seed: int
    converged: bool
    time_to_threshold: float | None
    final_accuracy: float
    final_cost: float
    aborted: bool = False


@dataclass
class ResultRecord:
    """Per-seed outcomes plus ensemble statistics. Time quartiles are over converged seeds only."""

    seeds: list[SeedResult] = field(default_factory=list)

    @property
    def converged_fraction(self) -> float:
        if not self.seeds:
            return 0.0
        return sum(r.converged for r in self.seeds) / len(self.seeds)

    def _times(self) -> np.ndarray:
        return np.array([r.time_to_threshold for r in self.seeds if r.converged], dtype=float)

    def time_quartiles(self) -> tuple[float, float, float] | None:
        times = self._times()
        if times.size == 0:
            return None
        q1, median, q3 = np.percentile(times, [25, 50, 75])
        return float(q1), float(median), float(q3)

    @property
    def median_time(self) -> float | None:
        quartiles = self.time_quartiles()
        return None if quartiles is None else quartiles[1]

    @property
    def median_final_accuracy(self) -> float:
        values = [r.final_accuracy for r in self.seeds if not math.isnan(r.final_accuracy)]
        return float(np.median(values)) if values else math.nan

    def ensemble_row(self) -> dict:
        quartiles = self.time_quartiles() or (None, None, None)
        return {
            "converged_fraction": self.converged_fraction,
            "median_time": quartiles[1],
            "q1_time": quartiles[0],
            "q3_time": quartiles[2],
            "median_final_accuracy": self.median_final_accuracy,
        }


def summarize(results: list[SeedResult]) -> ResultRecord:
    return ResultRecord(sorted(results, key=lambda r: r.seed))


# ── CSV output ───────────────────────────────────────────────────────────────

def _cell(value) -> str:
    """Locale-independent cell text; missing values are empty."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_summary_csv(path, record: ResultRecord) -> None:
    rows = [(r.seed, r.converged, r.time_to_threshold, r.final_accuracy, r.final_cost) for r in record.seeds]
    atomic_write_text(path, _csv_text(SUMMARY_HEADER, rows))


def write_ensemble_csv(path, record: ResultRecord) -> None:
    row = record.ensemble_row()
    atomic_write_text(path, _csv_text(ENSEMBLE_HEADER, [[row[k] for k in ENSEMBLE_HEADER]]))


def read_summary_csv(path) -> list[SeedResult]:
    """Parse a summary.csv back into SeedResults."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        return [
            SeedResult(
                seed=int(row["seed"]),
                converged=row["converged"] == "1",
                time_to_threshold=float(row["time_to_threshold"]) if row["time_to_threshold"] else None,
                final_accuracy=float(row["final_accuracy"]),
                final_cost=float(row["final_cost"]),
            )
            for row in reader
        ]


# ── Runs ─────────────────────────────────────────────────────────────────────

def run_seed(config: ExperimentConfig, seed: int) -> tuple[SeedResult, TrainingTrace]:
    """Train one ensemble member. A numerical abort becomes a non-converged result."""
    train_set, test_set = config.build_datasets()
    spec = config.build_network()
    clocks, scheme = config.build_clocks_and_scheme(spec.param_count)
    try:
        trace, state = train(
            spec, train_set, clocks, scheme,
            imperfections=config.build_imperfections(),
            stop=config.build_stop(),
            seed=seed,
            init_scale=config.raw["init_scale"],
            record_stride=config.raw["record_stride"],
            eval_every=config.raw["eval_every"],
        )
    except TrainingAborted as exc:
        return SeedResult(seed, False, None, math.nan, math.nan, aborted=True), exc.trace or TrainingTrace()

    final_accuracy = trace.final_accuracy
    if test_set is not None:
        final_accuracy = accuracy(spec, state.theta, test_set)
    result = SeedResult(seed, trace.converged, trace.time_to_threshold, final_accuracy, trace.final_cost)
    return result, trace


def _run_seed_job(raw: dict, seed: int) -> tuple[SeedResult, TrainingTrace]:
    # Worker processes receive the plain config document and rebuild everything locally.
    return run_seed(parse_config(raw), seed)


def _execute(config: ExperimentConfig, seeds: list[int]) -> list[tuple[SeedResult, TrainingTrace]]:
    workers = min(config.workers, len(seeds))
    if workers <= 1:
        return [run_seed(config, seed) for seed in seeds]
    logger.info("Running %d seeds on %d worker processes", len(seeds), workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_seed_job, [config.raw] * len(seeds), seeds))


def run(config: ExperimentConfig, out_dir=None, seeds: list[int] | None = None,
        stride: int | None = None) -> ResultRecord:
    """Run every seed and write config.json, trace_<seed>.csv, summary.csv and ensemble.csv.

    Raises TrainingAborted when every seed aborted.
    """
    if stride is not None:
        config = config.with_overrides(record_stride=stride)
    seeds = config.seeds if seeds is None else list(seeds)
    out_dir = out_dir or config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    config.save(os.path.join(out_dir, "config.json"))
    logger.info("Running %d seed(s) on %s", len(seeds), config.build_network().describe())

    outcomes = _execute(config, seeds)
    for result, trace in outcomes:
        trace.to_csv(os.path.join(out_dir, f"trace_{result.seed}.csv"))
        if result.aborted:
            logger.warning("Seed %d aborted on a non-finite value", result.seed)

    record = summarize([result for result, _ in outcomes])
    write_summary_csv(os.path.join(out_dir, "summary.csv"), record)
    write_ensemble_csv(os.path.join(out_dir, "ensemble.csv"), record)
    logger.info("Finished %d seeds: converged fraction %.2f, median time %s",
                len(seeds), record.converged_fraction, record.median_time)

    if all(r.aborted for r in record.seeds):
        raise TrainingAborted(-1, math.nan, f"all {len(seeds)} seeds aborted")
    return record


# ── Sweeps ───────────────────────────────────────────────────────────────────

@dataclass
class SweepResult:
    axis: str
    rows: list[tuple[float, ResultRecord]]

    @property
    def max_eta(self) -> float | None:
        """Largest eta before the converged fraction first drops below one half."""
        if self.axis != "eta":
            return None
        best = None
        for value, record in sorted(self.rows, key=lambda row: row[0]):
            if record.converged_fraction < MIN_CONVERGED_FRACTION:
                break
            best = value
        return best


def _format_value(value: float) -> str:
    return f"{value:g}"


def write_sweep_csv(path, result: SweepResult) -> None:
    header = ("axis_value",) + ENSEMBLE_HEADER
    rows = []
    for value, record in result.rows:
        row = record.ensemble_row()
        rows.append([float(value)] + [row[k] for k in ENSEMBLE_HEADER])
    atomic_write_text(path, _csv_text(header, rows))


def sweep(config: ExperimentConfig, axis: str, values: list[float], out_dir=None,
          seeds: list[int] | None = None) -> SweepResult:
    """One ensemble per axis value, each in its own subdirectory, plus sweep.csv."""
    if not values:
        raise ValueError("sweep needs at least one value")
    out_dir = out_dir or config.output_dir
    rows = []
    for value in values:
        point = config.with_axis_value(axis, value)
        logger.info("Sweep %s = %s", axis, value)
        record = run(point, os.path.join(out_dir, f"{axis}_{_format_value(value)}"), seeds=seeds)
        rows.append((value, record))
    result = SweepResult(axis, rows)
    write_sweep_csv(os.path.join(out_dir, "sweep.csv"), result)
    if axis == "eta":
        logger.info("Max eta with >= %d%% converged: %s", int(MIN_CONVERGED_FRACTION * 100), result.max_eta)
    return result


# ── Gradient angle ───────────────────────────────────────────────────────────

@dataclass
class AngleSummaryRow:
    step: int
    median: float
    q1: float
    q3: float


def angle_trajectory(config: ExperimentConfig, seed: int, checkpoints=ANGLE_CHECKPOINTS) -> list[float]:
    """Accumulate G without updating and measure its angle to the full-dataset gradient at each checkpoint."""
    if config.mode is not Mode.DISCRETE:
        raise ValueError("the angle protocol runs in discrete mode")
    train_set, _ = config.build_datasets()
    spec = config.build_network()
    clocks, scheme = config.build_clocks_and_scheme(spec.param_count)
    clocks = ClockConfig(tau_p=clocks.tau_p, tau_theta=math.inf, tau_x=clocks.tau_x, eta=clocks.eta,
                         delta_theta=clocks.delta_theta, parallel_batch=clocks.parallel_batch,
                         sampling=clocks.sampling)
    objective = NetworkObjective(spec, train_set)
    theta = init_params(spec, seed, config.raw["init_scale"])
    true_grad = backprop_grad(spec, theta, train_set.inputs, train_set.targets)

    state = init_state(objective, theta, scheme, seed)
    angles = []
    for checkpoint in sorted(checkpoints):
        while state.n < checkpoint:
            discrete_step(state, objective, clocks, scheme, IDEAL)
        angles.append(angle_between(state.G, true_grad))
    logger.debug("Seed %d angles: %s", seed, angles)
    return angles


def angle_experiment(config: ExperimentConfig, checkpoints=ANGLE_CHECKPOINTS, out_dir=None,
                     seeds: list[int] | None = None) -> list[AngleSummaryRow]:
    """Angle protocol over all seeds; writes angle.csv and angle_summary.csv."""
    checkpoints = sorted(checkpoints)
    seeds = config.seeds if seeds is None else list(seeds)
    out_dir = out_dir or config.output_dir
    os.makedirs(out_dir, exist_ok=True)

    per_seed = {seed: angle_trajectory(config, seed, checkpoints) for seed in seeds}
    rows = [(seed, step, angle) for seed, angles in per_seed.items() for step, angle in zip(checkpoints, angles)]
    atomic_write_text(os.path.join(out_dir, "angle.csv"), _csv_text(("seed", "step", "angle_deg"), rows))

    summary = []
    table = np.array([per_seed[s] for s in seeds])
    for k, step in enumerate(checkpoints):
        q1, median, q3 = np.percentile(table[:, k], [25, 50, 75])
        summary.append(AngleSummaryRow(step, float(median), float(q1), float(q3)))
    atomic_write_text(os.path.join(out_dir, "angle_summary.csv"),
                      _csv_text(("step", "median", "q1", "q3"), [(r.step, r.median, r.q1, r.q3) for r in summary]))
    return summary

