"""
experiment_config.py
Experiment configs: JSON documents filled from defaults, validated field by field,
and turned into datasets, networks, clocks and perturbation schemes.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass

from dotenv import load_dotenv

from file_store import load_json, save_json
from imperfections import ImperfectionConfig
from mgd_trainer import ClockConfig, Mode, Preset, Sampling, StopConditions, preset
from network_core import Activation, NetworkSpec, cifar_cnn_spec, fashion_cnn_spec, feedforward_spec
from perturbation import PerturbationKind, PerturbationScheme, make_scheme
from tasks_data import (
    GRID,
    LETTERS,
    Dataset,
    load_cifar_batch,
    load_idx,
    max_shift,
    nist7x7_dataset,
    parity_dataset,
    with_input_shape,
)

load_dotenv()

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SWEEP_AXES = {
    "eta": ("clocks", "eta"),
    "tau_theta": ("clocks", "tau_theta"),
    "sigma_c": ("imperfections", "sigma_c"),
    "sigma_theta": ("imperfections", "sigma_theta"),
    "sigma_a": ("imperfections", "sigma_a"),
}

_DEFAULT_TASKS = {
    "parity": {"n_bits": 2},
    "nist7x7": {"samples_per_class": 100, "pixel_flip_prob": 0.05, "shift_range": 1, "seed": 0},
    "idx": {"images": None, "labels": None, "test_images": None, "test_labels": None,
            "n_classes": 10, "input_shape": None, "limit": None},
    "cifar": {"batches": None, "test_batches": None, "limit": None},
}
_DEFAULT_NETWORK = {"preset": "feedforward", "sizes": [2, 2, 1], "activation": "sigmoid", "n_classes": 10}
_DEFAULT_CLOCKS = {"tau_theta": 1, "tau_x": 1, "tau_hp": 10.0, "dt": 1.0, "eta": 5.0,
                   "parallel_batch": 1, "sampling": "cyclic"}
_DEFAULT_SCHEME = {"kind": "random", "delta_theta": 0.01, "tau_p": 1, "bandwidth": 0.3, "seed": 0}
_DEFAULT_IMPERFECTIONS = {"sigma_c": 0.0, "sigma_theta": 0.0, "sigma_a": 0.0, "defect_seed": 0}
_DEFAULT_STOP = {"max_steps": 10000, "cost_threshold": 0.04, "accuracy_threshold": None}
_DEFAULT_TOP = {
    "init_scale": 1.0,
    "mode": "discrete",
    "preset": None,
    "seeds": 1,
    "record_stride": 100,
    "eval_every": None,
    "output_dir": None,
    "workers": None,
}
_SECTIONS = {
    "network": _DEFAULT_NETWORK,
    "clocks": _DEFAULT_CLOCKS,
    "scheme": _DEFAULT_SCHEME,
    "imperfections": _DEFAULT_IMPERFECTIONS,
    "stop": _DEFAULT_STOP,
}
_NETWORK_PRESETS = ("feedforward", "fashion_cnn", "cifar_cnn")


class ConfigError(ValueError):
    """Invalid experiment config; `field` is the dotted path of the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# ── Environment ──────────────────────────────────────────────────────────────

def default_output_dir() -> str:
    return os.getenv("MGD_OUTPUT_DIR", "results")


def default_workers() -> int:
    value = os.getenv("MGD_WORKERS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        raise ConfigError("MGD_WORKERS", f"expected an integer, got {value!r}") from None


def resolve_data_path(path: str) -> str:
    """Relative dataset paths are taken from MGD_DATA_DIR when it is set."""
    data_dir = os.getenv("MGD_DATA_DIR")
    if data_dir and not os.path.isabs(path):
        return os.path.join(data_dir, path)
    return path


# ── Field checks ─────────────────────────────────────────────────────────────

def _merge(field: str, given, defaults: dict) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(field, f"expected an object, got {type(given).__name__}")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"{field}.{unknown[0]}", "unknown field")
    merged = copy.deepcopy(defaults)
    merged.update(given)
    return merged


def _number(field: str, value, *, minimum: float | None = None, strict: bool = False,
            allow_inf: bool = False) -> float:
    if allow_inf and value in ("inf", "infinity", "Infinity"):
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value):
        raise ConfigError(field, f"expected a number, got {value!r}")
    if math.isinf(value) and not allow_inf:
        raise ConfigError(field, "must be finite")
    if minimum is not None:
        if strict and not value > minimum:
            raise ConfigError(field, f"must be > {minimum}, got {value}")
        if not strict and not value >= minimum:
            raise ConfigError(field, f"must be >= {minimum}, got {value}")
    return value


def _integer(field: str, value, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
        raise ConfigError(field, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(field, f"must be >= {minimum}, got {value}")
    return int(value)


def _choice(field: str, value, options) -> str:
    if value not in options:
        raise ConfigError(field, f"expected one of {list(options)}, got {value!r}")
    return value


def _optional(check, field: str, value, **kwargs):
    return None if value is None else check(field, value, **kwargs)


# ── Parsing ──────────────────────────────────────────────────────────────────

def _parse_task(given) -> dict:
    if not isinstance(given, dict) or "name" not in given:
        raise ConfigError("task.name", "required")
    name = _choice("task.name", given["name"], _DEFAULT_TASKS)
    task = _merge("task", {k: v for k, v in given.items() if k != "name"}, _DEFAULT_TASKS[name])

    if name == "parity":
        task["n_bits"] = _integer("task.n_bits", task["n_bits"], 1)
        if task["n_bits"] > 16:
            raise ConfigError("task.n_bits", "must be <= 16")
    elif name == "nist7x7":
        task["samples_per_class"] = _integer("task.samples_per_class", task["samples_per_class"], 1)
        flip = _number("task.pixel_flip_prob", task["pixel_flip_prob"], minimum=0)
        if flip > 1:
            raise ConfigError("task.pixel_flip_prob", "must be <= 1")
        task["shift_range"] = _integer("task.shift_range", task["shift_range"], 0)
        if task["shift_range"] > max_shift():
            raise ConfigError("task.shift_range", f"must be <= {max_shift()} to keep glyphs on the grid")
        task["seed"] = _integer("task.seed", task["seed"])
    elif name == "idx":
        for key in ("images", "labels"):
            if not isinstance(task[key], str):
                raise ConfigError(f"task.{key}", "path required")
        if (task["test_images"] is None) != (task["test_labels"] is None):
            raise ConfigError("task.test_labels", "test_images and test_labels go together")
        task["n_classes"] = _integer("task.n_classes", task["n_classes"], 2)
        task["limit"] = _optional(_integer, "task.limit", task["limit"], minimum=1)
    else:
        if not isinstance(task["batches"], list) or not task["batches"]:
            raise ConfigError("task.batches", "non-empty list of paths required")
        task["limit"] = _optional(_integer, "task.limit", task["limit"], minimum=1)
    task["name"] = name
    return task


def _parse_clocks(clocks: dict, mode: str) -> None:
    discrete = mode == Mode.DISCRETE.value
    tau_theta = _number("clocks.tau_theta", clocks["tau_theta"], minimum=0, strict=True, allow_inf=discrete)
    clocks["tau_theta"] = "inf" if math.isinf(tau_theta) else tau_theta
    if discrete:
        clocks["tau_x"] = _integer("clocks.tau_x", clocks["tau_x"], 1)
        if not math.isinf(tau_theta):
            clocks["tau_theta"] = _integer("clocks.tau_theta", tau_theta, 1)
    else:
        _number("clocks.tau_x", clocks["tau_x"], minimum=0, strict=True)
    _number("clocks.tau_hp", clocks["tau_hp"], minimum=0, strict=True)
    _number("clocks.dt", clocks["dt"], minimum=0, strict=True)
    _number("clocks.eta", clocks["eta"], minimum=0)
    clocks["parallel_batch"] = _integer("clocks.parallel_batch", clocks["parallel_batch"], 1)
    _choice("clocks.sampling", clocks["sampling"], [s.value for s in Sampling])


def _check_task_fits(task: dict, sizes: list[int]) -> None:
    # Widths of the file-backed tasks are only known once the data is loaded.
    if task["name"] == "parity":
        n_in, n_out = task["n_bits"], 1
    elif task["name"] == "nist7x7":
        n_in, n_out = GRID * GRID, len(LETTERS)
    else:
        return
    if sizes[0] != n_in:
        raise ConfigError("network.sizes", f"input width {sizes[0]} does not fit {task['name']} inputs ({n_in})")
    if sizes[-1] != n_out:
        raise ConfigError("network.sizes", f"output width {sizes[-1]} does not fit {task['name']} targets ({n_out})")


def _parse_seeds(value) -> list[int]:
    if isinstance(value, list):
        if not value:
            raise ConfigError("seeds", "list must not be empty")
        seeds = [_integer(f"seeds[{i}]", s, 0) for i, s in enumerate(value)]
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds", "duplicate seed")
        return seeds
    return list(range(_integer("seeds", value, 1)))


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config document and fill every missing field from the defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    if "schema_version" not in raw:
        raise ConfigError("schema_version", "required")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {raw['schema_version']!r}, expected {SCHEMA_VERSION}")

    known = {"schema_version", "task"} | set(_SECTIONS) | set(_DEFAULT_TOP)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")

    resolved = {"schema_version": SCHEMA_VERSION, "task": _parse_task(raw.get("task"))}
    for section, defaults in _SECTIONS.items():
        resolved[section] = _merge(section, raw.get(section), defaults)
    for key, default in _DEFAULT_TOP.items():
        resolved[key] = copy.deepcopy(raw.get(key, default))

    resolved["mode"] = _choice("mode", resolved["mode"], [m.value for m in Mode])
    if resolved["preset"] is not None:
        _choice("preset", resolved["preset"], [p.value for p in Preset])
        if (resolved["preset"] == Preset.ANALOG_HOMODYNE.value) != (resolved["mode"] == Mode.ANALOG.value):
            raise ConfigError("mode", "analog_homodyne preset and analog mode go together")

    network = resolved["network"]
    _choice("network.preset", network["preset"], _NETWORK_PRESETS)
    if network["preset"] == "feedforward":
        sizes = network["sizes"]
        if not isinstance(sizes, list) or len(sizes) < 2:
            raise ConfigError("network.sizes", "list of at least two layer widths required")
        network["sizes"] = [_integer(f"network.sizes[{i}]", s, 1) for i, s in enumerate(sizes)]
        _choice("network.activation", network["activation"],
                [a.value for a in Activation if a is not Activation.DEFECT_LOGISTIC])
        _check_task_fits(resolved["task"], network["sizes"])
    network["n_classes"] = _integer("network.n_classes", network["n_classes"], 2)

    _parse_clocks(resolved["clocks"], resolved["mode"])

    scheme = resolved["scheme"]
    _choice("scheme.kind", scheme["kind"], [k.value for k in PerturbationKind])
    if resolved["mode"] == Mode.ANALOG.value and scheme["kind"] == PerturbationKind.SEQUENTIAL.value:
        raise ConfigError("scheme.kind", "analog mode needs a sinusoidal or code scheme")
    _number("scheme.delta_theta", scheme["delta_theta"], minimum=0, strict=True)
    scheme["tau_p"] = _integer("scheme.tau_p", scheme["tau_p"], 1)
    _number("scheme.bandwidth", scheme["bandwidth"], minimum=0, strict=True)
    scheme["seed"] = _integer("scheme.seed", scheme["seed"], 0)

    for key in ("sigma_c", "sigma_theta", "sigma_a"):
        _number(f"imperfections.{key}", resolved["imperfections"][key], minimum=0)
    _integer("imperfections.defect_seed", resolved["imperfections"]["defect_seed"], 0)

    stop = resolved["stop"]
    stop["max_steps"] = _integer("stop.max_steps", stop["max_steps"], 1)
    _optional(_number, "stop.cost_threshold", stop["cost_threshold"], minimum=0)
    _optional(_number, "stop.accuracy_threshold", stop["accuracy_threshold"], minimum=0)

    _number("init_scale", resolved["init_scale"], minimum=0, strict=True)
    resolved["seeds"] = _parse_seeds(resolved["seeds"])
    resolved["record_stride"] = _integer("record_stride", resolved["record_stride"], 1)
    resolved["eval_every"] = _optional(_integer, "eval_every", resolved["eval_every"], minimum=1)
    resolved["workers"] = _optional(_integer, "workers", resolved["workers"], minimum=1)
    if resolved["output_dir"] is not None and not isinstance(resolved["output_dir"], str):
        raise ConfigError("output_dir", "expected a path string")

    config = ExperimentConfig(resolved)
    # Cross-field rules (Nyquist limit, analog tau_theta) surface from the builders.
    try:
        config.build_clocks_and_scheme(1)
    except ValueError as exc:
        section = "scheme" if "bandwidth" in str(exc) or "Nyquist" in str(exc) else "clocks"
        raise ConfigError(section, str(exc)) from None
    return config


def load_config(path) -> ExperimentConfig:
    try:
        raw = load_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path} is not valid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from None
    return parse_config(raw)


# ── Resolved config ──────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    raw: dict

    @property
    def seeds(self) -> list[int]:
        return list(self.raw["seeds"])

    @property
    def output_dir(self) -> str:
        return self.raw["output_dir"] or default_output_dir()

    @property
    def workers(self) -> int:
        return self.raw["workers"] or default_workers()

    @property
    def mode(self) -> Mode:
        return Mode(self.raw["mode"])

    def save(self, path) -> None:
        save_json(path, self.raw)

    def with_overrides(self, **fields) -> ExperimentConfig:
        raw = copy.deepcopy(self.raw)
        raw.update(fields)
        return parse_config(raw)

    def with_axis_value(self, axis: str, value: float) -> ExperimentConfig:
        """Copy with one sweep axis (eta, tau_theta, sigma_c, sigma_theta, sigma_a) set."""
        if axis not in SWEEP_AXES:
            raise ConfigError("axis", f"expected one of {list(SWEEP_AXES)}, got {axis!r}")
        section, key = SWEEP_AXES[axis]
        raw = copy.deepcopy(self.raw)
        raw[section][key] = value
        return parse_config(raw)

    def build_datasets(self) -> tuple[Dataset, Dataset | None]:
        """Training set and optional held-out test set."""
        task = self.raw["task"]
        name = task["name"]
        if name == "parity":
            return parity_dataset(task["n_bits"]), None
        if name == "nist7x7":
            return nist7x7_dataset(task["samples_per_class"], task["pixel_flip_prob"],
                                   task["shift_range"], task["seed"]), None
        if name == "idx":
            train = load_idx(resolve_data_path(task["images"]), resolve_data_path(task["labels"]),
                             task["n_classes"])
            test = None
            if task["test_images"]:
                test = load_idx(resolve_data_path(task["test_images"]),
                                resolve_data_path(task["test_labels"]), task["n_classes"])
            shape = task["input_shape"] or self._network_input_shape(train.input_shape)
        else:
            train = load_cifar_batch([resolve_data_path(p) for p in task["batches"]])
            test = None
            if task["test_batches"]:
                test = load_cifar_batch([resolve_data_path(p) for p in task["test_batches"]])
            shape = None
        if task["limit"]:
            train = train.subset(slice(0, task["limit"]))
        if shape:
            train = with_input_shape(train, shape)
            test = with_input_shape(test, shape) if test is not None else None
        return train, test

    def _network_input_shape(self, data_shape: tuple[int, ...]) -> tuple[int, ...] | None:
        preset_name = self.raw["network"]["preset"]
        if preset_name == "fashion_cnn":
            return fashion_cnn_spec().input_shape
        if preset_name == "feedforward" and len(data_shape) > 1:
            return (math.prod(data_shape),)
        return None

    def build_network(self) -> NetworkSpec:
        network = self.raw["network"]
        if network["preset"] == "fashion_cnn":
            return fashion_cnn_spec(network["n_classes"])
        if network["preset"] == "cifar_cnn":
            return cifar_cnn_spec(network["n_classes"])
        return feedforward_spec(network["sizes"], network["activation"])

    def build_clocks_and_scheme(self, n_params: int) -> tuple[ClockConfig, PerturbationScheme]:
        clocks = self.raw["clocks"]
        scheme = self.raw["scheme"]
        tau_theta = math.inf if clocks["tau_theta"] == "inf" else clocks["tau_theta"]
        scheme_seed = scheme["seed"]
        if self.raw["preset"] is not None:
            return preset(self.raw["preset"], n_params, tau_p=scheme["tau_p"], delta_theta=scheme["delta_theta"],
                          eta=clocks["eta"], tau_x=clocks["tau_x"], parallel_batch=clocks["parallel_batch"],
                          bandwidth=scheme["bandwidth"], dt=clocks["dt"], tau_theta=tau_theta,
                          tau_hp=clocks["tau_hp"], sampling=clocks["sampling"], seed=scheme_seed)

        built = make_scheme(scheme["kind"], n_params, delta_theta=scheme["delta_theta"], tau_p=scheme["tau_p"],
                            bandwidth=scheme["bandwidth"], dt=clocks["dt"], seed=scheme_seed)
        clock_config = ClockConfig(
            tau_p=built.tau_p, tau_theta=tau_theta, tau_x=clocks["tau_x"], tau_hp=clocks["tau_hp"],
            dt=clocks["dt"], eta=clocks["eta"], delta_theta=scheme["delta_theta"],
            parallel_batch=clocks["parallel_batch"], mode=self.raw["mode"], sampling=clocks["sampling"],
        )
        return clock_config, built

    def build_imperfections(self) -> ImperfectionConfig:
        return ImperfectionConfig(**self.raw["imperfections"])

    def build_stop(self) -> StopConditions:
        return StopConditions(**self.raw["stop"])
