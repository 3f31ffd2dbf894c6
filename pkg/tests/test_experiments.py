"""Unit tests for experiments.py"""

import csv
import math
import os

import numpy as np
import pytest

from experiment_config import parse_config
from experiments import (
    ENSEMBLE_HEADER,
    SUMMARY_HEADER,
    ResultRecord,
    SeedResult,
    SweepResult,
    angle_experiment,
    angle_trajectory,
    read_summary_csv,
    run,
    run_seed,
    summarize,
    sweep,
    write_ensemble_csv,
    write_summary_csv,
)
from mgd_trainer import TrainingAborted, TrainingTrace

WORKERS = min(8, os.cpu_count() or 1)


def _xor_config(**overrides):
    raw = {
        "schema_version": 1,
        "task": {"name": "parity", "n_bits": 2},
        "network": {"sizes": [2, 2, 1]},
        "preset": "spsa",
        "clocks": {"eta": 5.0},
        "scheme": {"delta_theta": 0.01},
        "stop": {"max_steps": 300},
        "record_stride": 100,
        "seeds": 2,
    }
    raw.update(overrides)
    return parse_config(raw)


def _read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def _abort(*args, **kwargs):
    exc = TrainingAborted(3, math.nan, "cost is not finite")
    exc.trace = TrainingTrace()
    raise exc


class TestResultRecord:
    def _record(self):
        return summarize([
            SeedResult(2, True, 300.0, 1.0, 0.01),
            SeedResult(0, True, 100.0, 1.0, 0.02),
            SeedResult(1, False, None, 0.5, 0.2),
            SeedResult(3, True, 200.0, 0.75, 0.03),
        ])

    def test_sorted_by_seed(self):
        assert [r.seed for r in self._record().seeds] == [0, 1, 2, 3]

    def test_converged_fraction(self):
        assert self._record().converged_fraction == 0.75

    def test_quartiles_over_converged_only(self):
        assert self._record().time_quartiles() == (150.0, 200.0, 250.0)

    def test_no_converged_seeds(self):
        record = ResultRecord([SeedResult(0, False, None, 0.5, 0.2)])
        assert record.median_time is None
        assert record.ensemble_row()["q1_time"] is None

    def test_median_accuracy_ignores_nan(self):
        record = ResultRecord([SeedResult(0, False, None, math.nan, math.nan, aborted=True),
                               SeedResult(1, True, 10.0, 0.8, 0.01)])
        assert record.median_final_accuracy == 0.8

    def test_empty_record(self):
        assert ResultRecord().converged_fraction == 0.0


class TestCsv:
    def test_summary_round_trip(self, tmp_path):
        record = summarize([SeedResult(0, True, 120.0, 1.0, 0.0125), SeedResult(1, False, None, 0.5, 0.25)])
        path = tmp_path / "summary.csv"
        write_summary_csv(path, record)
        rows = _read_rows(path)
        assert tuple(rows[0]) == SUMMARY_HEADER
        assert rows[2] == ["1", "0", "", "0.5", "0.25"]
        assert read_summary_csv(path) == record.seeds

    def test_ensemble_missing_values_are_empty(self, tmp_path):
        path = tmp_path / "ensemble.csv"
        write_ensemble_csv(path, ResultRecord([SeedResult(0, False, None, 0.5, 0.2)]))
        rows = _read_rows(path)
        assert tuple(rows[0]) == ENSEMBLE_HEADER
        assert rows[1] == ["0.0", "", "", "", "0.5"]


class TestRun:
    def test_writes_all_files(self, tmp_path):
        run(_xor_config(), tmp_path)
        for name in ("config.json", "trace_0.csv", "trace_1.csv", "summary.csv", "ensemble.csv"):
            assert (tmp_path / name).exists()

    def test_trace_header_and_stride(self, tmp_path):
        run(_xor_config(stop={"max_steps": 300, "cost_threshold": None}), tmp_path)
        rows = _read_rows(tmp_path / "trace_0.csv")
        assert rows[0] == ["step", "cost", "accuracy", "g_norm"]
        assert [int(float(r[0])) for r in rows[1:]] == [0, 100, 200, 300]

    def test_deterministic(self, tmp_path):
        run(_xor_config(), tmp_path / "a")
        run(_xor_config(), tmp_path / "b")
        for name in ("trace_0.csv", "trace_1.csv", "summary.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_summary_matches_ensemble(self, tmp_path):
        record = run(_xor_config(seeds=4), tmp_path)
        recomputed = summarize(read_summary_csv(tmp_path / "summary.csv"))
        assert recomputed.ensemble_row() == record.ensemble_row()
        ensemble = _read_rows(tmp_path / "ensemble.csv")[1]
        assert float(ensemble[0]) == record.converged_fraction

    def test_single_seed(self, tmp_path):
        record = run(_xor_config(), tmp_path, seeds=[5])
        assert [r.seed for r in record.seeds] == [5]
        assert (tmp_path / "trace_5.csv").exists()

    def test_stride_override(self, tmp_path):
        run(_xor_config(stop={"max_steps": 100, "cost_threshold": None}), tmp_path, seeds=[0], stride=50)
        steps = [int(float(r[0])) for r in _read_rows(tmp_path / "trace_0.csv")[1:]]
        assert steps == [0, 50, 100]

    def test_all_seeds_aborted(self, tmp_path, monkeypatch):
        monkeypatch.setattr("experiments.train", _abort)
        with pytest.raises(TrainingAborted):
            run(_xor_config(), tmp_path)
        assert (tmp_path / "summary.csv").exists()
        assert _read_rows(tmp_path / "trace_0.csv") == [["step", "cost", "accuracy", "g_norm"]]

    def test_aborted_seed_is_not_converged(self, monkeypatch):
        monkeypatch.setattr("experiments.train", _abort)
        result, _ = run_seed(_xor_config(), 0)
        assert result.aborted and not result.converged
        assert math.isnan(result.final_cost)


class TestSweep:
    def test_single_value(self, tmp_path):
        result = sweep(_xor_config(), "eta", [2.0], tmp_path)
        assert [value for value, _ in result.rows] == [2.0]
        assert (tmp_path / "eta_2" / "summary.csv").exists()
        rows = _read_rows(tmp_path / "sweep.csv")
        assert rows[0][0] == "axis_value"
        assert len(rows) == 2

    def test_empty_values(self, tmp_path):
        with pytest.raises(ValueError):
            sweep(_xor_config(), "eta", [], tmp_path)

    def test_max_eta(self):
        def record(fraction):
            n = 4
            hits = int(fraction * n)
            return ResultRecord([SeedResult(i, i < hits, 1.0 if i < hits else None, 1.0, 0.0) for i in range(n)])

        result = SweepResult("eta", [(4.0, record(0.25)), (1.0, record(1.0)), (2.0, record(0.5)), (8.0, record(1.0))])
        assert result.max_eta == 2.0

    def test_max_eta_only_for_eta_axis(self):
        assert SweepResult("sigma_c", []).max_eta is None


class TestAngle:
    def test_trajectory_length(self):
        angles = angle_trajectory(_xor_config(), 0, checkpoints=(10, 100))
        assert len(angles) == 2
        assert all(0.0 <= a <= 180.0 for a in angles)

    def test_writes_csvs(self, tmp_path):
        summary = angle_experiment(_xor_config(), (10, 50), tmp_path, seeds=[0, 1, 2])
        assert [row.step for row in summary] == [10, 50]
        rows = _read_rows(tmp_path / "angle.csv")
        assert rows[0] == ["seed", "step", "angle_deg"]
        assert len(rows) == 1 + 3 * 2
        assert _read_rows(tmp_path / "angle_summary.csv")[0] == ["step", "median", "q1", "q3"]

    def test_analog_config_rejected(self):
        config = parse_config({"schema_version": 1, "task": {"name": "parity"}, "mode": "analog",
                               "scheme": {"kind": "sinusoidal"}})
        with pytest.raises(ValueError, match="discrete"):
            angle_trajectory(config, 0, (10,))


@pytest.mark.slow
class TestBenchmarks:
    def test_xor_ensemble_converges(self, tmp_path):
        record = run(_xor_config(seeds=20, stop={"max_steps": 10000}), tmp_path)
        assert record.converged_fraction >= 0.9
        assert np.median([r.final_accuracy for r in record.seeds]) == 1.0

    def test_angle_shrinks_with_integration_time(self, tmp_path):
        summary = angle_experiment(_xor_config(), (100, 1000, 10000), tmp_path, seeds=list(range(100)))
        medians = [row.median for row in summary]
        assert medians[0] > medians[1] > medians[2]
        assert medians[0] - medians[2] >= 20.0

    def test_walsh_and_random_codes_both_learn(self, tmp_path):
        for kind in ("walsh", "random"):
            config = _xor_config(preset=None, scheme={"kind": kind, "delta_theta": 0.01},
                                 seeds=10, stop={"max_steps": 10000})
            record = run(config, tmp_path / kind)
            assert record.converged_fraction >= 0.5

    def test_large_tau_theta_keeps_learning(self, tmp_path):
        config = _xor_config(preset=None, clocks={"tau_theta": 100, "eta": 1.0},
                             seeds=10, stop={"max_steps": 50000})
        assert run(config, tmp_path).converged_fraction >= 0.5

    def test_max_eta_does_not_grow_with_tau_theta(self, tmp_path):
        # Batch of four: every step shows all XOR samples, G sums tau_theta steps of them.
        max_etas = []
        for tau_theta in (1, 4, 16, 64):
            config = _xor_config(preset=None, clocks={"tau_theta": tau_theta, "tau_x": tau_theta, "parallel_batch": 4},
                                 seeds=100, workers=WORKERS, record_stride=tau_theta,
                                 stop={"max_steps": 5000 * tau_theta})
            values = [c / tau_theta for c in (2.0, 8.0, 32.0, 128.0)]
            result = sweep(config, "eta", values, tmp_path / f"tau_{tau_theta}")
            assert result.max_eta is not None
            max_etas.append(result.max_eta)
        assert all(later <= earlier for earlier, later in zip(max_etas, max_etas[1:]))
        assert max_etas[-1] < max_etas[0]


@pytest.mark.slow
class TestImperfectionTrends:
    """Ensemble trends under cost noise, update noise and activation defects (25 seeds per point)."""

    SEEDS = 25
    TOLERANCE = 0.2   # about two binomial standard errors at 25 seeds

    def test_small_cost_noise_costs_little_and_more_noise_converges_less(self, tmp_path):
        fractions, times = [], []
        for sigma_c in (0.0, 0.05, 0.5, 5.0):
            config = _xor_config(seeds=self.SEEDS, workers=WORKERS, stop={"max_steps": 10000},
                                 imperfections={"sigma_c": sigma_c})
            record = run(config, tmp_path / f"sigma_c_{sigma_c:g}")
            fractions.append(record.converged_fraction)
            times.append(record.median_time)
        assert times[0] is not None and times[1] is not None
        assert times[1] <= 2 * times[0]
        assert all(later <= earlier + self.TOLERANCE for earlier, later in zip(fractions, fractions[1:]))
        assert fractions[-1] < fractions[0]

    def test_update_noise_matters_less_with_long_integration(self, tmp_path):
        def fraction(tau_theta, sigma_theta):
            config = _xor_config(preset=None, seeds=self.SEEDS, workers=WORKERS,
                                 clocks={"tau_theta": tau_theta, "eta": 0.5},
                                 scheme={"kind": "random", "delta_theta": 0.2},
                                 stop={"max_steps": 200_000}, record_stride=1000,
                                 imperfections={"sigma_theta": sigma_theta})
            return run(config, tmp_path / f"tau_{tau_theta}_{sigma_theta:g}").converged_fraction

        clean_long, noisy_long = fraction(100, 0.0), fraction(100, 0.1)
        clean_short, noisy_short = fraction(1, 0.0), fraction(1, 0.1)
        assert noisy_long >= clean_long - self.TOLERANCE
        assert noisy_short < clean_short
        assert clean_short - noisy_short > clean_long - noisy_long

    def test_mild_defects_at_most_double_training_time(self, tmp_path):
        records = {}
        for sigma_a in (0.0, 0.25, 1.0):
            config = parse_config({
                "schema_version": 1,
                "task": {"name": "nist7x7", "samples_per_class": 25, "pixel_flip_prob": 0.05, "shift_range": 1},
                "network": {"sizes": [49, 4, 4]},
                "clocks": {"eta": 2.0},
                "scheme": {"kind": "walsh", "delta_theta": 0.01},
                "stop": {"max_steps": 100_000, "cost_threshold": None, "accuracy_threshold": 0.8},
                "imperfections": {"sigma_a": sigma_a},
                "seeds": self.SEEDS,
                "workers": WORKERS,
                "record_stride": 1000,
            })
            records[sigma_a] = run(config, tmp_path / f"sigma_a_{sigma_a:g}")
        assert records[0.0].median_time is not None and records[0.25].median_time is not None
        assert records[0.25].median_time <= 2 * records[0.0].median_time
        assert records[1.0].converged_fraction < records[0.0].converged_fraction
