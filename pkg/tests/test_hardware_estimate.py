"""Unit tests for hardware_estimate.py"""

import pytest

from hardware_estimate import (
    BENCHMARK_STEPS,
    HARDWARE_PROFILES,
    estimate_table,
    estimate_time,
    format_duration,
)

EXPECTED = {
    ("HW1", "2-bit parity"): (20.0, "20 s"),
    ("HW1", "Fashion-MNIST"): (2000.0, "33 min"),
    ("HW1", "CIFAR-10"): (20000.0, "5.6 hours"),
    ("HW2", "2-bit parity"): (2e-4, "200 µs"),
    ("HW2", "Fashion-MNIST"): (0.02, "20 ms"),
    ("HW2", "CIFAR-10"): (0.2, "200 ms"),
    ("HW3", "2-bit parity"): (4e-6, "4 µs"),
    ("HW3", "Fashion-MNIST"): (4e-4, "400 µs"),
    ("HW3", "CIFAR-10"): (4e-3, "4 ms"),
}


class TestEstimateTime:
    def test_formula(self):
        assert estimate_time(1e4, 1e-3) == pytest.approx(20.0)

    def test_overhead_factor(self):
        assert estimate_time(100, 1.0, overhead_factor=1.0) == pytest.approx(100.0)

    @pytest.mark.parametrize("args", [(0, 1e-3), (1e4, -1.0), (1e4, 1e-3, 0.0)])
    def test_nonpositive_inputs(self, args):
        with pytest.raises(ValueError):
            estimate_time(*args)


class TestEstimateTable:
    def test_all_nine_entries(self):
        rows = estimate_table()
        assert len(rows) == len(HARDWARE_PROFILES) * len(BENCHMARK_STEPS) == 9
        for row in rows:
            seconds, display = EXPECTED[(row["hardware"], row["task"])]
            assert row["seconds"] == pytest.approx(seconds)
            assert row["display"] == display

    def test_custom_profile(self):
        rows = estimate_table({"lab": {"tau_p": 1.0}}, {"toy": 30})
        assert rows == [{"hardware": "lab", "task": "toy", "steps": 30, "tau_p": 1.0,
                         "seconds": 60.0, "display": "1 min"}]


class TestFormatDuration:
    def test_units(self):
        assert format_duration(7200) == "2.0 hours"
        assert format_duration(90) == "2 min"
        assert format_duration(1.5) == "1.5 s"
        assert format_duration(2.5e-3) == "2.5 ms"
        assert format_duration(3e-9) == "3 ns"
        assert format_duration(5e-12) == "5 ps"
