"""Unit tests for mgd_trainer.py"""

import csv
import math

import numpy as np
import pytest

from gradient_oracle import finite_diff_grad, relative_error
from imperfections import ImperfectionConfig
from mgd_trainer import (
    ClockConfig,
    Mode,
    NetworkObjective,
    Preset,
    Sampling,
    StopConditions,
    TrainingAborted,
    TrainingTrace,
    analog_step,
    discrete_step,
    epoch_length,
    highpass_step,
    init_state,
    lowpass_step,
    preset,
    run_training,
    train,
)
from network_core import feedforward_spec, init_params
from perturbation import (
    PerturbationKind,
    random_scheme,
    sequential_scheme,
    sinusoidal_scheme,
)
from tasks_data import Dataset, parity_dataset

DT = 0.01


class QuadraticObjective:
    """C(theta) = sum(theta**2), independent of the sample."""

    n_params = 1
    n_samples = 1

    def cost(self, theta, indices):
        return float(np.sum(theta ** 2))

    def dataset_cost(self, theta):
        return self.cost(theta, None)

    def accuracy(self, theta):
        return math.nan


class ConstantObjective(QuadraticObjective):
    def cost(self, theta, indices):
        return 3.0


class NanObjective(QuadraticObjective):
    def cost(self, theta, indices):
        return math.nan


def _xor():
    return feedforward_spec([2, 2, 1]), parity_dataset(2)


class TestClockConfig:
    def test_batch_size(self):
        assert ClockConfig(tau_theta=8, tau_x=2, parallel_batch=3).batch_size == 12

    def test_tau_x_below_one_rejected(self):
        with pytest.raises(ValueError, match="tau_x"):
            ClockConfig(tau_x=0.5)

    def test_fractional_tau_theta_rejected_in_discrete_mode(self):
        with pytest.raises(ValueError, match="tau_theta"):
            ClockConfig(tau_theta=2.5)

    def test_infinite_tau_theta_allowed_in_discrete_mode(self):
        assert math.isinf(ClockConfig(tau_theta=math.inf).batch_size)

    def test_infinite_tau_theta_rejected_in_analog_mode(self):
        with pytest.raises(ValueError, match="analog"):
            ClockConfig(tau_theta=math.inf, mode="analog")

    def test_negative_eta_rejected(self):
        with pytest.raises(ValueError):
            ClockConfig(eta=-1.0)

    def test_analog_samples_every_tau_x_over_dt(self):
        assert ClockConfig(mode=Mode.ANALOG, tau_x=5.0, dt=0.5).steps_per_sample == 10


class TestDiscreteStep:
    def test_quadratic_forward_difference(self):
        objective = QuadraticObjective()
        scheme = sequential_scheme(1, delta_theta=DT)
        clocks = ClockConfig(eta=0.1, delta_theta=DT)
        state = init_state(objective, np.array([1.0]), scheme)
        discrete_step(state, objective, clocks, scheme)
        assert state.last_G[0] == pytest.approx(2.01)
        assert state.theta[0] == pytest.approx(1.0 - 0.1 * 2.01)
        assert state.G[0] == 0.0
        assert state.n == 1

    def test_update_moves_theta_by_eta_g(self):
        spec, data = _xor()
        objective = NetworkObjective(spec, data)
        scheme = random_scheme(9, delta_theta=DT)
        clocks = ClockConfig(tau_theta=3, eta=0.7, delta_theta=DT)
        state = init_state(objective, init_params(spec, 0), scheme)
        for _ in range(2):
            discrete_step(state, objective, clocks, scheme)
        before = state.theta.copy()
        discrete_step(state, objective, clocks, scheme)
        np.testing.assert_array_equal(state.theta, before - 0.7 * state.last_G)

    def test_no_update_inside_window(self):
        spec, data = _xor()
        objective = NetworkObjective(spec, data)
        scheme = random_scheme(9, delta_theta=DT)
        clocks = ClockConfig(tau_theta=5, eta=1.0, delta_theta=DT)
        theta0 = init_params(spec, 0)
        state = init_state(objective, theta0, scheme)
        for _ in range(4):
            discrete_step(state, objective, clocks, scheme)
        np.testing.assert_array_equal(state.theta, theta0)
        assert np.any(state.G != 0)
        discrete_step(state, objective, clocks, scheme)
        assert not np.array_equal(state.theta, theta0)
        assert np.all(state.G == 0)

    def test_zero_perturbation_learns_nothing(self):
        objective = QuadraticObjective()
        scheme = sequential_scheme(1, delta_theta=DT, tau_p=2)
        clocks = ClockConfig(tau_p=2, eta=1.0, delta_theta=DT)
        state = init_state(objective, np.array([0.5]), scheme)
        state.perturbation.n = 1  # mid-period: the held value is used without refresh
        state.perturbation.current = np.zeros(1)
        discrete_step(state, objective, clocks, scheme)
        assert state.tc == 0.0
        np.testing.assert_array_equal(state.theta, [0.5])

    def test_infinite_tau_theta_never_updates(self):
        spec, data = _xor()
        objective = NetworkObjective(spec, data)
        scheme = random_scheme(9, delta_theta=DT)
        clocks = ClockConfig(tau_theta=math.inf, eta=5.0, delta_theta=DT)
        theta0 = init_params(spec, 2)
        state = init_state(objective, theta0, scheme)
        for _ in range(50):
            discrete_step(state, objective, clocks, scheme)
        np.testing.assert_array_equal(state.theta, theta0)
        assert state.updates == 0

    def test_parallel_batch_sums_per_sample_errors(self):
        spec, data = _xor()
        theta0 = init_params(spec, 4)
        scheme = random_scheme(9, delta_theta=DT, seed=1)
        batched = ClockConfig(eta=0.0, delta_theta=DT, parallel_batch=4)
        objective = NetworkObjective(spec, data)
        state = init_state(objective, theta0, scheme, seed=0)
        discrete_step(state, objective, batched, scheme)

        total = np.zeros(9)
        for i in range(4):
            single = NetworkObjective(spec, data.subset([i]))
            s = init_state(single, theta0, scheme, seed=0)
            discrete_step(s, single, ClockConfig(eta=0.0, delta_theta=DT), scheme)
            total += s.last_G
        np.testing.assert_allclose(state.last_G, total, rtol=1e-9)

    def test_non_finite_cost_aborts(self):
        objective = NanObjective()
        scheme = sequential_scheme(1)
        state = init_state(objective, np.array([1.0]), scheme)
        with pytest.raises(TrainingAborted) as info:
            discrete_step(state, objective, ClockConfig(), scheme)
        assert info.value.step == 0


class TestFiniteDifferenceEquivalence:
    @pytest.mark.parametrize("sizes", [[2, 2, 1], [49, 4, 4]])
    def test_matches_forward_difference(self, sizes):
        spec = feedforward_spec(sizes)
        rng = np.random.default_rng(sum(sizes))
        for trial in range(100):
            theta = init_params(spec, trial)
            x = rng.random((1, sizes[0]))
            y = np.eye(sizes[-1])[[rng.integers(sizes[-1])]] if sizes[-1] > 1 else rng.integers(0, 2, (1, 1))
            sample = Dataset(x, y)
            objective = NetworkObjective(spec, sample)
            clocks, scheme = preset(Preset.FINITE_DIFFERENCE, spec.param_count, delta_theta=DT, eta=0.0)
            state = init_state(objective, theta, scheme)
            for _ in range(spec.param_count):
                discrete_step(state, objective, clocks, scheme)
            expected = finite_diff_grad(spec, theta, x, sample.targets, DT, "forward")
            assert relative_error(state.last_G, expected) < 1e-9


class TestBatchingIdentity:
    def test_window_of_four_equals_four_windows_of_one(self):
        spec, data = _xor()
        theta0 = init_params(spec, 6)
        scheme = random_scheme(9, delta_theta=DT, seed=2)
        objective = NetworkObjective(spec, data)

        wide = init_state(objective, theta0, scheme, seed=1)
        for _ in range(4):
            discrete_step(wide, objective, ClockConfig(tau_theta=4, eta=0.0, delta_theta=DT), scheme)

        narrow = init_state(objective, theta0, scheme, seed=1)
        total = np.zeros(9)
        for _ in range(4):
            discrete_step(narrow, objective, ClockConfig(tau_theta=1, eta=0.0, delta_theta=DT), scheme)
            total += narrow.last_G
        np.testing.assert_array_equal(wide.last_G, total)

    def test_g_grows_with_window(self):
        spec, data = _xor()
        theta0 = init_params(spec, 6)
        scheme = random_scheme(9, delta_theta=DT, seed=2)
        sample = data.subset([1])
        objective = NetworkObjective(spec, sample)
        norms = {}
        for tau_theta in (100, 1000):
            state = init_state(objective, theta0, scheme, seed=3)
            for _ in range(tau_theta):
                discrete_step(state, objective, ClockConfig(tau_theta=tau_theta, eta=0.0, delta_theta=DT), scheme)
            norms[tau_theta] = np.linalg.norm(state.last_G)
        assert norms[1000] / norms[100] == pytest.approx(10.0, rel=0.2)


class TestAnalogFilters:
    def test_constant_cost_keeps_highpass_at_zero(self):
        tc = 0.0
        for _ in range(100):
            tc = highpass_step(tc, 3.0, 3.0, 10.0, 1.0)
        assert tc == 0.0

    def test_unit_step_response(self):
        tc = highpass_step(0.0, 1.0, 0.0, 10.0, 1.0)
        assert tc == pytest.approx(10 / 11)
        for k in range(2, 6):
            tc = highpass_step(tc, 1.0, 1.0, 10.0, 1.0)
            assert tc == pytest.approx((10 / 11) ** k)

    def test_lowpass_converges_to_input(self):
        g = np.zeros(2)
        e0 = np.array([0.3, -1.5])
        for _ in range(2000):
            g = lowpass_step(g, e0, 20.0, 1.0)
        np.testing.assert_allclose(g, e0, rtol=1e-9)

    def test_fixed_point(self):
        e0 = np.array([0.7])
        np.testing.assert_allclose(lowpass_step(e0, e0, 5.0, 0.1), e0, rtol=1e-14)


class TestAnalogStep:
    def test_constant_cost_gives_no_gradient(self):
        objective = ConstantObjective()
        scheme = sinusoidal_scheme(1, bandwidth=0.3, delta_theta=DT)
        clocks = ClockConfig(tau_p=scheme.tau_p, tau_theta=5.0, mode="analog", eta=1.0, delta_theta=DT)
        state = init_state(objective, np.array([0.2]), scheme)
        for _ in range(50):
            analog_step(state, objective, clocks, scheme)
        assert state.tc == 0.0
        np.testing.assert_array_equal(state.theta, [0.2])

    def test_first_step_has_no_transient(self):
        objective = QuadraticObjective()
        scheme = sinusoidal_scheme(1, bandwidth=0.3, delta_theta=DT)
        clocks = ClockConfig(tau_p=scheme.tau_p, tau_theta=5.0, mode="analog", delta_theta=DT)
        state = init_state(objective, np.array([1.0]), scheme)
        analog_step(state, objective, clocks, scheme)
        assert state.tc == 0.0

    def test_descends_quadratic(self):
        objective = QuadraticObjective()
        clocks, scheme = preset(Preset.ANALOG_HOMODYNE, 1, delta_theta=DT, eta=0.05, tau_theta=2.0, tau_hp=5.0)
        state = init_state(objective, np.array([1.0]), scheme)
        for _ in range(3000):
            analog_step(state, objective, clocks, scheme)
        assert abs(state.theta[0]) < 0.5

    def test_theta_moves_every_step(self):
        spec, data = _xor()
        objective = NetworkObjective(spec, data)
        clocks, scheme = preset("analog_homodyne", 9, delta_theta=DT, eta=1.0)
        state = init_state(objective, init_params(spec, 0), scheme)
        for _ in range(5):
            analog_step(state, objective, clocks, scheme)
        assert state.updates == 5


class TestTrain:
    def test_zero_eta_keeps_theta(self):
        spec, data = _xor()
        clocks, scheme = preset("spsa", 9, eta=0.0, delta_theta=DT)
        theta0 = init_params(spec, 1)
        _, state = train(spec, data, clocks, scheme, stop=StopConditions(max_steps=200), seed=1, theta0=theta0)
        np.testing.assert_array_equal(state.theta, theta0)

    def test_same_seed_bit_identical(self):
        spec, data = _xor()
        clocks, scheme = preset("spsa", 9, eta=5.0, delta_theta=DT)
        runs = [train(spec, data, clocks, scheme, stop=StopConditions(max_steps=500), seed=3,
                      record_stride=50) for _ in range(2)]
        assert runs[0][0].checksums == runs[1][0].checksums
        assert runs[0][1].theta.tobytes() == runs[1][1].theta.tobytes()

    def test_ideal_imperfections_match_default(self):
        spec, data = _xor()
        clocks, scheme = preset("spsa", 9, eta=5.0, delta_theta=DT)
        stop = StopConditions(max_steps=300)
        a, _ = train(spec, data, clocks, scheme, stop=stop, seed=2)
        b, _ = train(spec, data, clocks, scheme, ImperfectionConfig(0.0, 0.0, 0.0, defect_seed=99), stop, seed=2)
        assert a.checksums == b.checksums

    def test_xor_cost_decreases(self):
        spec, data = _xor()
        clocks, scheme = preset("spsa", 9, eta=5.0, delta_theta=DT)
        trace, _ = train(spec, data, clocks, scheme, stop=StopConditions(max_steps=3000), seed=0)
        assert trace.costs[-1] < trace.costs[0]
        if trace.converged:
            assert trace.time_to_threshold == trace.steps[-1]

    def test_trace_rows_follow_stride(self):
        spec, data = _xor()
        clocks, scheme = preset("spsa", 9, eta=0.0, delta_theta=DT)
        trace, _ = train(spec, data, clocks, scheme, stop=StopConditions(max_steps=250, cost_threshold=None),
                         record_stride=100)
        assert trace.steps == [0, 100, 200, 250]
        assert not trace.converged

    def test_accuracy_threshold_stops(self):
        spec, data = _xor()
        clocks, scheme = preset("spsa", 9, eta=0.0, delta_theta=DT)
        trace, state = train(spec, data, clocks, scheme,
                             stop=StopConditions(max_steps=1000, cost_threshold=None, accuracy_threshold=0.0),
                             record_stride=10)
        assert trace.converged
        assert state.n == 10

    def test_mismatched_scheme_rejected(self):
        spec, data = _xor()
        clocks = ClockConfig(delta_theta=DT)
        with pytest.raises(ValueError):
            train(spec, data, clocks, random_scheme(8, delta_theta=DT))
        with pytest.raises(ValueError):
            train(spec, data, clocks, random_scheme(9, delta_theta=0.02))

    def test_sequential_scheme_rejected_in_analog_mode(self):
        spec, data = _xor()
        clocks = ClockConfig(mode="analog", delta_theta=DT)
        with pytest.raises(ValueError, match="analog"):
            train(spec, data, clocks, sequential_scheme(9, delta_theta=DT))

    def test_cost_noise_changes_trajectory(self):
        spec, data = _xor()
        clocks, scheme = preset("spsa", 9, eta=5.0, delta_theta=DT)
        stop = StopConditions(max_steps=200)
        clean, _ = train(spec, data, clocks, scheme, stop=stop, seed=2)
        noisy, _ = train(spec, data, clocks, scheme, ImperfectionConfig(sigma_c=0.5), stop, seed=2)
        assert clean.checksums[-1] != noisy.checksums[-1]

    def test_abort_carries_partial_trace(self):
        objective = NanObjective()
        scheme = sequential_scheme(1)
        with pytest.raises(TrainingAborted) as info:
            run_training(objective, np.array([1.0]), ClockConfig(), scheme,
                         evaluate=lambda theta: (1.0, 0.0))
        assert isinstance(info.value.trace, TrainingTrace)

    def test_random_sampling_reproducible(self):
        spec, data = _xor()
        clocks, scheme = preset("spsa", 9, eta=5.0, delta_theta=DT, sampling=Sampling.RANDOM)
        a, _ = train(spec, data, clocks, scheme, stop=StopConditions(max_steps=300), seed=5)
        b, _ = train(spec, data, clocks, scheme, stop=StopConditions(max_steps=300), seed=5)
        assert a.checksums == b.checksums


class TestDescent:
    def test_coordinate_descent_on_quadratic_is_monotone(self):
        objective = QuadraticObjective()
        clocks, scheme = preset("coordinate_descent", 1, delta_theta=1e-4, eta=0.05)
        state = init_state(objective, np.array([2.0]), scheme)
        costs = [objective.cost(state.theta, None)]
        for _ in range(50):
            discrete_step(state, objective, clocks, scheme)
            costs.append(objective.cost(state.theta, None))
        assert all(b <= a for a, b in zip(costs, costs[1:]))


class TestPresets:
    def test_finite_difference(self):
        clocks, scheme = preset("finite_difference", 9, tau_p=2)
        assert clocks.tau_theta == 18
        assert scheme.kind is PerturbationKind.SEQUENTIAL

    def test_spsa(self):
        clocks, scheme = preset("spsa", 5)
        assert clocks.tau_theta == clocks.tau_p
        assert scheme.kind is PerturbationKind.RANDOM

    def test_coordinate_descent_equals_finite_difference_for_one_parameter(self):
        cd = preset("coordinate_descent", 1)
        fd = preset("finite_difference", 1)
        assert cd[0] == fd[0]
        assert cd[1].kind is fd[1].kind and cd[1].tau_p == fd[1].tau_p

    def test_analog_homodyne(self):
        clocks, scheme = preset("analog_homodyne", 4, bandwidth=0.3)
        assert clocks.mode is Mode.ANALOG
        np.testing.assert_allclose(scheme.frequencies, [0.075, 0.15, 0.225, 0.3])

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown preset"):
            preset("adam", 3)


class TestTraceCsv:
    def test_header_and_rows(self, tmp_path):
        trace = TrainingTrace(stride=10)
        trace.record(0, 0.25, 0.5, 0.0)
        trace.record(10, 0.125, 0.75, 1.5)
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "cost", "accuracy", "g_norm"]
        assert [float(v) for v in rows[2]] == [10, 0.125, 0.75, 1.5]

    def test_steps_must_increase(self):
        trace = TrainingTrace()
        trace.record(5, 0.1, 1.0, 0.0)
        with pytest.raises(ValueError):
            trace.record(5, 0.1, 1.0, 0.0)


class TestEpochLength:
    def test_discrete(self):
        assert epoch_length(ClockConfig(tau_x=1000, tau_theta=1000), 4) == 4000

    def test_parallel_batch(self):
        assert epoch_length(ClockConfig(parallel_batch=4), 8) == 2
