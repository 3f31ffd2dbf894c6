"""
mgd_trainer.py
Discrete and analog multiplexed gradient descent loops.

Discrete mode (one iteration per step n, 0-based):
  n % tau_x == 0                     -> load the next sample(s)
  n % tau_x == 0 or n % tau_theta == 0 -> baseline C0 with perturbations off
  n % tau_p == 0                     -> refresh the perturbation
  G += (C(theta + p) - C0) * p / delta_theta**2
  (n + 1) % tau_theta == 0           -> theta -= eta * G, G = 0

Analog mode highpasses the raw cost, lowpasses the error signal into G and
moves theta every step.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

import numpy as np

from file_store import atomic_write_text
from imperfections import (
    IDEAL,
    ImperfectionConfig,
    apply_activation_defects,
    apply_cost_noise,
    measure_cost_modulation,
    noisy_param_update,
)
from network_core import NetworkSpec, ShapeError, accuracy, batch_cost, dataset_cost, init_params
from perturbation import (
    DEFAULT_BANDWIDTH,
    DEFAULT_DELTA_THETA,
    PerturbationKind,
    PerturbationScheme,
    PerturbationState,
    new_state,
    next_perturbation,
    random_scheme,
    sequential_scheme,
    sinusoidal_scheme,
)
from tasks_data import Dataset

logger = logging.getLogger(__name__)

TRACE_HEADER = ("step", "cost", "accuracy", "g_norm")
DEFAULT_COST_THRESHOLD = 0.04


class TrainingAborted(RuntimeError):
    """A cost or parameter went non-finite."""

    def __init__(self, step: int, cost: float, message: str):
        super().__init__(f"step {step}: {message} (cost={cost})")
        self.step = step
        self.cost = cost
        self.trace: TrainingTrace | None = None


class Mode(Enum):
    DISCRETE = "discrete"
    ANALOG = "analog"


class Sampling(Enum):
    CYCLIC = "cyclic"
    RANDOM = "random"


class Preset(Enum):
    FINITE_DIFFERENCE = "finite_difference"
    COORDINATE_DESCENT = "coordinate_descent"
    SPSA = "spsa"
    ANALOG_HOMODYNE = "analog_homodyne"


# ── Configuration ────────────────────────────────────────────────────────────

def _whole_steps(name: str, value: float) -> int:
    if not value >= 1 or float(value) != int(value):
        raise ValueError(f"{name} must be a whole number of steps >= 1, got {value}")
    return int(value)


@dataclass(frozen=True)
class ClockConfig:
    tau_p: float = 1
    tau_theta: float = 1          # math.inf: accumulate G forever, never update
    tau_x: float = 1
    tau_hp: float = 10.0
    dt: float = 1.0
    eta: float = 1.0
    delta_theta: float = DEFAULT_DELTA_THETA
    parallel_batch: int = 1
    mode: Mode = Mode.DISCRETE
    sampling: Sampling = Sampling.CYCLIC

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "sampling", Sampling(self.sampling))
        for name in ("tau_p", "tau_theta", "tau_x", "tau_hp", "dt", "delta_theta"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if not self.eta >= 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        object.__setattr__(self, "parallel_batch", _whole_steps("parallel_batch", self.parallel_batch))

        if self.mode is Mode.DISCRETE:
            # code schemes need whole refresh periods; sinusoidal tau_p = 1/bandwidth need not be
            if math.isfinite(self.tau_p) and float(self.tau_p) == int(self.tau_p):
                object.__setattr__(self, "tau_p", int(self.tau_p))
            object.__setattr__(self, "tau_x", _whole_steps("tau_x", self.tau_x))
            if not math.isinf(self.tau_theta):
                object.__setattr__(self, "tau_theta", _whole_steps("tau_theta", self.tau_theta))
        else:
            if math.isinf(self.tau_theta):
                raise ValueError("analog mode needs a finite tau_theta (lowpass time constant)")
            if self.tau_x < self.dt:
                raise ValueError(f"tau_x ({self.tau_x}) must be at least one timestep dt ({self.dt})")

    @property
    def batch_size(self) -> float:
        return self.tau_theta / self.tau_x * self.parallel_batch

    @property
    def steps_per_sample(self) -> int:
        if self.mode is Mode.DISCRETE:
            return self.tau_x
        return max(1, round(self.tau_x / self.dt))


@dataclass(frozen=True)
class StopConditions:
    max_steps: int = 10_000
    cost_threshold: float | None = DEFAULT_COST_THRESHOLD
    accuracy_threshold: float | None = None

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")

    def reached(self, cost: float, acc: float) -> bool:
        if self.cost_threshold is not None and cost < self.cost_threshold:
            return True
        return self.accuracy_threshold is not None and acc >= self.accuracy_threshold


# ── Objectives ───────────────────────────────────────────────────────────────

class Objective(Protocol):
    n_params: int
    n_samples: int

    def cost(self, theta: np.ndarray, indices: np.ndarray) -> float:
        """Summed cost of the samples at `indices` evaluated at theta."""
        ...


class NetworkObjective:
    """Summed MSE of a network over selected dataset samples."""

    def __init__(self, spec: NetworkSpec, dataset: Dataset):
        if dataset.input_shape != spec.input_shape:
            raise ShapeError(f"dataset inputs {dataset.input_shape} do not fit network input {spec.input_shape}")
        if dataset.output_size != spec.output_size:
            raise ShapeError(f"dataset targets have width {dataset.output_size}, network outputs {spec.output_size}")
        self.spec = spec
        self.dataset = dataset
        self.n_params = spec.param_count
        self.n_samples = dataset.n

    def cost(self, theta: np.ndarray, indices: np.ndarray) -> float:
        return batch_cost(self.spec, theta, self.dataset.inputs[indices], self.dataset.targets[indices])

    def dataset_cost(self, theta: np.ndarray) -> float:
        return dataset_cost(self.spec, theta, self.dataset)

    def accuracy(self, theta: np.ndarray) -> float:
        return accuracy(self.spec, theta, self.dataset)


# ── State and trace ──────────────────────────────────────────────────────────

@dataclass
class TrainerState:
    theta: np.ndarray
    G: np.ndarray
    perturbation: PerturbationState
    sampling_rng: np.random.Generator = field(repr=False)
    noise_rng: np.random.Generator = field(repr=False)
    n: int = 0
    c0: float = 0.0
    tc: float = 0.0
    prev_cost: float | None = None     # analog: C(t - dt)
    indices: np.ndarray | None = None
    last_G: np.ndarray | None = None   # G just before the most recent reset
    last_cost: float = math.nan
    cursor: int = 0
    cost_noise_scale: float = 0.0
    updates: int = 0


def theta_checksum(theta: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(theta, dtype=float).tobytes()).hexdigest()[:12]


@dataclass
class TrainingTrace:
    stride: int = 1
    steps: list[int] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    g_norms: list[float] = field(default_factory=list)
    checksums: list[str] = field(default_factory=list)
    converged: bool = False
    time_to_threshold: float | None = None
    final_cost: float = math.nan
    final_accuracy: float = math.nan

    def record(self, step: int, cost: float, acc: float, g_norm: float, checksum: str = "") -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"trace steps must increase: {step} after {self.steps[-1]}")
        self.steps.append(step)
        self.costs.append(float(cost))
        self.accuracies.append(float(acc))
        self.g_norms.append(float(g_norm))
        self.checksums.append(checksum)

    def __len__(self) -> int:
        return len(self.steps)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for row in zip(self.steps, self.costs, self.accuracies, self.g_norms):
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv_text())


# ── Single steps ─────────────────────────────────────────────────────────────

def init_state(objective: Objective, theta0: np.ndarray, scheme: PerturbationScheme,
               seed: int = 0) -> TrainerState:
    """Independent perturbation, sampling and noise streams derived from one seed."""
    theta = np.array(theta0, dtype=float)
    if theta.shape != (objective.n_params,):
        raise ShapeError(f"theta has shape {theta.shape}, objective needs ({objective.n_params},)")
    sampling_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    return TrainerState(
        theta=theta,
        G=np.zeros_like(theta),
        perturbation=new_state(scheme, seed),
        sampling_rng=np.random.default_rng(sampling_seq),
        noise_rng=np.random.default_rng(noise_seq),
        last_G=np.zeros_like(theta),
    )


def _next_indices(state: TrainerState, n_samples: int, clocks: ClockConfig) -> np.ndarray:
    count = clocks.parallel_batch
    if clocks.sampling is Sampling.RANDOM:
        return state.sampling_rng.integers(0, n_samples, size=count)
    indices = (state.cursor + np.arange(count)) % n_samples
    state.cursor = (state.cursor + count) % n_samples
    return indices


def _measure(objective: Objective, theta: np.ndarray, state: TrainerState,
             imperfections: ImperfectionConfig) -> float:
    cost = objective.cost(theta, state.indices)
    if imperfections.sigma_c > 0:
        cost = apply_cost_noise(cost, imperfections.sigma_c, state.cost_noise_scale, state.noise_rng)
    if not math.isfinite(cost):
        raise TrainingAborted(state.n, cost, "cost measurement is not finite")
    return cost


def _update_theta(state: TrainerState, clocks: ClockConfig, imperfections: ImperfectionConfig) -> None:
    state.theta = noisy_param_update(state.theta, state.G, clocks.eta, imperfections.sigma_theta,
                                     clocks.delta_theta, state.noise_rng)
    if not np.all(np.isfinite(state.theta)):
        raise TrainingAborted(state.n, state.last_cost, "parameters became non-finite after update")
    state.updates += 1


def discrete_step(state: TrainerState, objective: Objective, clocks: ClockConfig,
                  scheme: PerturbationScheme, imperfections: ImperfectionConfig = IDEAL) -> TrainerState:
    """One iteration of the discrete loop. Mutates and returns state."""
    n = state.n
    new_sample = n % clocks.tau_x == 0
    if new_sample:
        state.indices = _next_indices(state, objective.n_samples, clocks)
    if new_sample or n % clocks.tau_theta == 0:
        state.c0 = _measure(objective, state.theta, state, imperfections)

    perturbation = next_perturbation(scheme, state.perturbation, objective.n_params)
    cost = _measure(objective, state.theta + perturbation, state, imperfections)
    state.last_cost = cost
    state.tc = cost - state.c0
    state.G += state.tc * perturbation / clocks.delta_theta ** 2

    if (n + 1) % clocks.tau_theta == 0:
        state.last_G = state.G.copy()
        _update_theta(state, clocks, imperfections)
        state.G = np.zeros_like(state.G)
        logger.debug("Update %d at step %d, |G|=%.3e", state.updates, n, np.linalg.norm(state.last_G))
    state.n = n + 1
    return state


def highpass_step(tc_prev: float, cost: float, cost_prev: float, tau_hp: float, dt: float) -> float:
    return tau_hp / (tau_hp + dt) * (tc_prev + cost - cost_prev)


def lowpass_step(g_prev: np.ndarray, error: np.ndarray, tau_theta: float, dt: float) -> np.ndarray:
    return dt / (tau_theta + dt) * (error + (tau_theta / dt) * g_prev)


def analog_step(state: TrainerState, objective: Objective, clocks: ClockConfig,
                scheme: PerturbationScheme, imperfections: ImperfectionConfig = IDEAL) -> TrainerState:
    """One timestep of the continuous loop. Mutates and returns state."""
    n = state.n
    if n % clocks.steps_per_sample == 0:
        state.indices = _next_indices(state, objective.n_samples, clocks)

    perturbation = next_perturbation(scheme, state.perturbation, objective.n_params)
    cost = _measure(objective, state.theta + perturbation, state, imperfections)
    state.last_cost = cost
    if state.prev_cost is None:
        state.prev_cost = cost
    state.tc = highpass_step(state.tc, cost, state.prev_cost, clocks.tau_hp, clocks.dt)
    state.prev_cost = cost

    error = state.tc * perturbation * clocks.dt / clocks.delta_theta ** 2
    state.G = lowpass_step(state.G, error, clocks.tau_theta, clocks.dt)
    state.last_G = state.G
    _update_theta(state, clocks, imperfections)
    state.n = n + 1
    return state


# ── Training loops ───────────────────────────────────────────────────────────

def _check_consistent(clocks: ClockConfig, scheme: PerturbationScheme, n_params: int) -> None:
    if scheme.n_params != n_params:
        raise ValueError(f"scheme perturbs {scheme.n_params} parameters, network has {n_params}")
    if scheme.delta_theta != clocks.delta_theta:
        raise ValueError(f"scheme delta_theta {scheme.delta_theta} != clocks delta_theta {clocks.delta_theta}")
    if clocks.mode is Mode.ANALOG:
        if scheme.kind is PerturbationKind.SEQUENTIAL:
            raise ValueError("analog mode needs a sinusoidal or code perturbation scheme")
    elif scheme.kind is not PerturbationKind.SINUSOIDAL and scheme.tau_p != clocks.tau_p:
        raise ValueError(f"scheme tau_p {scheme.tau_p} != clocks tau_p {clocks.tau_p}")


def run_training(objective: Objective, theta0: np.ndarray, clocks: ClockConfig,
                 scheme: PerturbationScheme, imperfections: ImperfectionConfig = IDEAL,
                 stop: StopConditions | None = None, seed: int = 0, record_stride: int = 100,
                 eval_every: int | None = None,
                 evaluate: Callable[[np.ndarray], tuple[float, float]] | None = None,
                 ) -> tuple[TrainingTrace, TrainerState]:
    """Step an objective until a stop condition, recording every `record_stride` steps.

    `evaluate(theta) -> (cost, accuracy)` defaults to the objective's own
    dataset_cost/accuracy methods.
    """
    stop = stop or StopConditions()
    if record_stride < 1:
        raise ValueError(f"record_stride must be >= 1, got {record_stride}")
    eval_every = eval_every or record_stride
    _check_consistent(clocks, scheme, objective.n_params)
    if evaluate is None:
        def evaluate(theta):
            return objective.dataset_cost(theta), objective.accuracy(theta)

    state = init_state(objective, theta0, scheme, seed)
    if imperfections.sigma_c > 0:
        state.cost_noise_scale = measure_cost_modulation(objective, state.theta, scheme, seed=seed)
    step_fn = discrete_step if clocks.mode is Mode.DISCRETE else analog_step

    trace = TrainingTrace(stride=record_stride)
    cost, acc = evaluate(state.theta)
    trace.record(0, cost, acc, 0.0, theta_checksum(state.theta))
    logger.info("Training %d parameters, mode=%s, scheme=%s, eta=%g, tau_theta=%s, seed=%d",
                objective.n_params, clocks.mode.value, scheme.kind.value, clocks.eta, clocks.tau_theta, seed)

    try:
        for _ in range(stop.max_steps):
            step_fn(state, objective, clocks, scheme, imperfections)
            n = state.n
            should_record = n % record_stride == 0
            if not (should_record or n % eval_every == 0):
                continue
            cost, acc = evaluate(state.theta)
            if should_record:
                trace.record(n, cost, acc, float(np.linalg.norm(state.last_G)), theta_checksum(state.theta))
            if stop.reached(cost, acc):
                trace.converged = True
                trace.time_to_threshold = n * clocks.dt / clocks.tau_p
                logger.info("Threshold reached at step %d (cost=%.4f, accuracy=%.3f)", n, cost, acc)
                break
    except TrainingAborted as exc:
        logger.warning("Training aborted: %s", exc)
        exc.trace = trace
        raise

    trace.final_cost, trace.final_accuracy = evaluate(state.theta)
    if trace.steps[-1] != state.n:
        trace.record(state.n, trace.final_cost, trace.final_accuracy,
                     float(np.linalg.norm(state.last_G)), theta_checksum(state.theta))
    if not trace.converged:
        logger.info("Stopped after %d steps without reaching threshold (cost=%.4f)", state.n, trace.final_cost)
    return trace, state


def train(spec: NetworkSpec, dataset: Dataset, clocks: ClockConfig, scheme: PerturbationScheme,
          imperfections: ImperfectionConfig | None = None, stop: StopConditions | None = None,
          seed: int = 0, theta0: np.ndarray | None = None, init_scale: float = 1.0,
          record_stride: int = 100, eval_every: int | None = None) -> tuple[TrainingTrace, TrainerState]:
    """Train a network on a dataset. Activation defects are drawn once per (defect_seed, seed)."""
    imperfections = imperfections or IDEAL
    if imperfections.sigma_a > 0:
        spec = apply_activation_defects(spec, imperfections.sigma_a, [imperfections.defect_seed, seed])
    objective = NetworkObjective(spec, dataset)
    theta = init_params(spec, seed, init_scale) if theta0 is None else np.array(theta0, dtype=float)
    return run_training(objective, theta, clocks, scheme, imperfections, stop, seed,
                        record_stride, eval_every)


# ── Presets ──────────────────────────────────────────────────────────────────

def preset(name: Preset | str, n_params: int, *, tau_p: int = 1, delta_theta: float = DEFAULT_DELTA_THETA,
           eta: float = 1.0, tau_x: int = 1, parallel_batch: int = 1, bandwidth: float = DEFAULT_BANDWIDTH,
           dt: float = 1.0, tau_theta: float = 1.0, tau_hp: float = 10.0,
           sampling: Sampling | str = Sampling.CYCLIC, seed: int = 0) -> tuple[ClockConfig, PerturbationScheme]:
    """Clock and scheme settings that turn the trainer into a named optimizer.

    `tau_theta` and `tau_hp` apply to analog_homodyne only; the discrete presets fix tau_theta.
    """
    try:
        name = Preset(name)
    except ValueError:
        raise ValueError(f"unknown preset {name!r}; expected one of {[p.value for p in Preset]}") from None
    if n_params < 1:
        raise ValueError(f"need at least one parameter, got {n_params}")

    common = dict(eta=eta, tau_x=tau_x, delta_theta=delta_theta, parallel_batch=parallel_batch,
                  sampling=Sampling(sampling))
    if name is Preset.FINITE_DIFFERENCE:
        clocks = ClockConfig(tau_p=tau_p, tau_theta=n_params * tau_p, **common)
        return clocks, sequential_scheme(n_params, delta_theta, tau_p)
    if name is Preset.COORDINATE_DESCENT:
        clocks = ClockConfig(tau_p=tau_p, tau_theta=tau_p, **common)
        return clocks, sequential_scheme(n_params, delta_theta, tau_p)
    if name is Preset.SPSA:
        clocks = ClockConfig(tau_p=tau_p, tau_theta=tau_p, **common)
        return clocks, random_scheme(n_params, delta_theta, tau_p, seed)

    scheme = sinusoidal_scheme(n_params, bandwidth, dt, delta_theta)
    clocks = ClockConfig(tau_p=scheme.tau_p, tau_theta=tau_theta, tau_hp=tau_hp, dt=dt,
                         mode=Mode.ANALOG, **common)
    return clocks, scheme


def epoch_length(clocks: ClockConfig, n_samples: int) -> float:
    """Steps needed to present every sample once."""
    return n_samples * clocks.steps_per_sample / clocks.parallel_batch
