"""
imperfections.py
Hardware non-idealities: additive cost noise, noisy parameter updates and
static per-neuron activation defects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import expit

from network_core import Activation, LayerKind, NetworkSpec
from perturbation import PerturbationScheme, new_state, next_perturbation

if TYPE_CHECKING:
    from mgd_trainer import Objective

logger = logging.getLogger(__name__)

MODULATION_PROBE_STEPS = 100


@dataclass(frozen=True)
class ImperfectionConfig:
    sigma_c: float = 0.0       # cost noise, in units of the RMS cost modulation
    sigma_theta: float = 0.0   # update noise, in units of the perturbation amplitude delta_theta
    sigma_a: float = 0.0       # spread of the activation defect parameters
    defect_seed: int = 0

    def __post_init__(self):
        for name in ("sigma_c", "sigma_theta", "sigma_a"):
            value = getattr(self, name)
            if not value >= 0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    @property
    def is_ideal(self) -> bool:
        return self.sigma_c == 0 and self.sigma_theta == 0 and self.sigma_a == 0


IDEAL = ImperfectionConfig()


# ── Activation defects ───────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class DefectTable:
    """Per-neuron logistic f_k(a) = alpha_k / (1 + exp(-beta_k (a - a_k))) + b_k."""

    alpha: np.ndarray
    beta: np.ndarray
    offset: np.ndarray   # a_k
    bias: np.ndarray     # b_k

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, name), dtype=float) for name in ("alpha", "beta", "offset", "bias")]
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
            raise ValueError("defect parameters must be 1-D arrays of equal length")
        for name, arr in zip(("alpha", "beta", "offset", "bias"), arrays):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.alpha.size

    def activate(self, z: np.ndarray) -> np.ndarray:
        """Evaluate over the last axis of z (one entry per neuron)."""
        return self.alpha * expit(self.beta * (z - self.offset)) + self.bias

    def derivative(self, z: np.ndarray) -> np.ndarray:
        s = expit(self.beta * (z - self.offset))
        return self.alpha * self.beta * s * (1.0 - s)


def ideal_defect_table(n_neurons: int) -> DefectTable:
    """alpha = beta = 1, a = b = 0: the plain sigmoid."""
    return DefectTable(np.ones(n_neurons), np.ones(n_neurons), np.zeros(n_neurons), np.zeros(n_neurons))


def make_defect_table(n_neurons: int, sigma_a: float, rng: np.random.Generator) -> DefectTable:
    """alpha, beta ~ N(1, sigma_a); a, b ~ N(0, sigma_a). Drawn once and never changed."""
    if sigma_a < 0:
        raise ValueError(f"sigma_a must be >= 0, got {sigma_a}")
    alpha = 1.0 + rng.normal(0.0, sigma_a, n_neurons)
    beta = 1.0 + rng.normal(0.0, sigma_a, n_neurons)
    offset = rng.normal(0.0, sigma_a, n_neurons)
    bias = rng.normal(0.0, sigma_a, n_neurons)
    return DefectTable(alpha, beta, offset, bias)


def defect_logistic(table: DefectTable, k: int, a: float) -> float:
    if not 0 <= k < len(table):
        raise ValueError(f"neuron {k} outside defect table of size {len(table)}")
    return float(table.alpha[k] * expit(table.beta[k] * (a - table.offset[k])) + table.bias[k])


def apply_activation_defects(spec: NetworkSpec, sigma_a: float, seed) -> NetworkSpec:
    """Replace every sigmoid dense layer with a defect-logistic one. sigma_a = 0 returns spec unchanged."""
    if sigma_a == 0:
        return spec
    rng = np.random.default_rng(seed)
    layers = []
    for layer in spec.layers:
        if layer.kind is LayerKind.DENSE and layer.activation is Activation.SIGMOID:
            table = make_defect_table(layer.n_out, sigma_a, rng)
            layer = replace(layer, activation=Activation.DEFECT_LOGISTIC, defects=table)
        layers.append(layer)
    return NetworkSpec(tuple(layers), spec.input_shape, spec.output_size)


# ── Noise ────────────────────────────────────────────────────────────────────

def apply_cost_noise(cost: float, sigma_c: float, modulation_scale: float,
                     rng: np.random.Generator) -> float:
    """cost + N(0, sigma_c * modulation_scale). sigma_c = 0 draws nothing."""
    if sigma_c < 0:
        raise ValueError(f"sigma_c must be >= 0, got {sigma_c}")
    if sigma_c == 0:
        return cost
    return cost + float(rng.normal(0.0, sigma_c * modulation_scale))


def noisy_param_update(theta: np.ndarray, G: np.ndarray, eta: float, sigma_theta: float,
                       delta_theta: float, rng: np.random.Generator) -> np.ndarray:
    """theta - eta*G, plus N(0, sigma_theta * delta_theta) per component when sigma_theta > 0."""
    if sigma_theta < 0:
        raise ValueError(f"sigma_theta must be >= 0, got {sigma_theta}")
    updated = theta - eta * G
    if sigma_theta > 0:
        updated = updated + rng.normal(0.0, sigma_theta * delta_theta, size=theta.shape)
    return updated


def measure_cost_modulation(objective: Objective, theta: np.ndarray, scheme: PerturbationScheme,
                            probe_steps: int = MODULATION_PROBE_STEPS, seed: int = 0) -> float:
    """RMS of C(theta + perturbation) - C(theta) over deterministic probe steps cycling the samples."""
    state = new_state(scheme, seed)
    diffs = np.empty(probe_steps)
    for k in range(probe_steps):
        indices = np.array([k % objective.n_samples])
        perturbation = next_perturbation(scheme, state, objective.n_params)
        diffs[k] = objective.cost(theta + perturbation, indices) - objective.cost(theta, indices)
    rms = float(np.sqrt(np.mean(diffs ** 2)))
    if rms == 0:
        logger.warning("Cost modulation measured as zero; cost noise will have no effect")
    logger.debug("Cost modulation RMS over %d probe steps: %.3e", probe_steps, rms)
    return rms
