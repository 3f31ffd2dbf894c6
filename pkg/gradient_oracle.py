"""
gradient_oracle.py
Reference gradients (backpropagation, finite differences), the angle metric,
and a plain SGD baseline trainer.
"""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mgd_trainer import DEFAULT_COST_THRESHOLD, TrainingAborted, TrainingTrace, theta_checksum
from network_core import (
    LayerKind,
    NetworkSpec,
    accuracy,
    activation_grad,
    batch_cost,
    dataset_cost,
    forward_trace,
    init_params,
    unpack_params,
)
from tasks_data import Dataset

logger = logging.getLogger(__name__)

FD_MODES = ("forward", "central")


class UndefinedAngleError(ValueError):
    """Angle requested against a zero vector."""


# ── Backpropagation ──────────────────────────────────────────────────────────

def _maxpool_backward(x_in: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Route each pooled gradient to the first maximum of its 2x2 block."""
    n, c, h, w = x_in.shape
    h2, w2 = h // 2, w // 2
    blocks = (x_in[:, :, :2 * h2, :2 * w2]
              .reshape(n, c, h2, 2, w2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h2, w2, 4))
    mask = np.arange(4) == blocks.argmax(axis=-1)[..., None]
    routed = (mask * delta[..., None]).reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    grad_in = np.zeros_like(x_in)
    grad_in[:, :, :2 * h2, :2 * w2] = routed.reshape(n, c, 2 * h2, 2 * w2)
    return grad_in


def backprop_grad(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Exact gradient of the summed per-sample MSE over the batch, in flat parameter layout."""
    trace = forward_trace(spec, theta, X)
    params = unpack_params(spec, theta)
    Y = np.asarray(Y, dtype=float)
    delta = 2.0 * (trace[-1].output - Y) / spec.output_size

    pieces: list[np.ndarray] = []
    for layer, p, record in zip(reversed(spec.layers), reversed(params), reversed(trace)):
        x_in = record.inputs
        if layer.kind is LayerKind.DENSE:
            weights, _ = p
            dz = delta * activation_grad(layer, record.pre_activation, record.output)
            pieces += [dz.sum(axis=0), (dz.T @ x_in).ravel()]
            delta = dz @ weights
        elif layer.kind is LayerKind.CONV3X3:
            weights, _ = p
            dz = delta * activation_grad(layer, record.pre_activation, record.output)
            windows = sliding_window_view(x_in, (3, 3), axis=(2, 3))
            grad_w = np.einsum("nohw,nchwij->ocij", dz, windows, optimize=True)
            pieces += [dz.sum(axis=(0, 2, 3)), grad_w.ravel()]
            padded = np.pad(dz, ((0, 0), (0, 0), (2, 2), (2, 2)))
            padded_windows = sliding_window_view(padded, (3, 3), axis=(2, 3))
            delta = np.einsum("nohwij,ocij->nchw", padded_windows, weights[:, :, ::-1, ::-1], optimize=True)
        elif layer.kind is LayerKind.MAXPOOL2X2:
            delta = _maxpool_backward(x_in, delta)
        else:
            delta = delta.reshape(x_in.shape)
    # pieces were collected back to front as (biases, weights) pairs
    return np.concatenate(pieces[::-1]) if pieces else np.zeros(0)


# ── Finite differences ───────────────────────────────────────────────────────

def finite_difference(cost_fn: Callable[[np.ndarray], float], theta: np.ndarray, delta_theta: float,
                      mode: str = "forward") -> np.ndarray:
    """Perturb one coordinate at a time by delta_theta."""
    if not delta_theta > 0:
        raise ValueError(f"delta_theta must be positive, got {delta_theta}")
    if mode not in FD_MODES:
        raise ValueError(f"mode must be one of {FD_MODES}, got {mode!r}")
    theta = np.asarray(theta, dtype=float)
    base = cost_fn(theta) if mode == "forward" else None
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += delta_theta
        if mode == "forward":
            grad[i] = (cost_fn(up) - base) / delta_theta
        else:
            down = theta.copy()
            down[i] -= delta_theta
            grad[i] = (cost_fn(up) - cost_fn(down)) / (2.0 * delta_theta)
    return grad


def finite_diff_grad(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray, Y: np.ndarray,
                     delta_theta: float, mode: str = "forward") -> np.ndarray:
    return finite_difference(lambda t: batch_cost(spec, t, X, Y), theta, delta_theta, mode)


# ── Comparison metrics ───────────────────────────────────────────────────────

def angle_between(G: np.ndarray, grad: np.ndarray) -> float:
    """Angle in degrees between two vectors."""
    G = np.asarray(G, dtype=float).ravel()
    grad = np.asarray(grad, dtype=float).ravel()
    norm_g, norm_grad = np.linalg.norm(G), np.linalg.norm(grad)
    if norm_g == 0 or norm_grad == 0:
        raise UndefinedAngleError("angle is undefined for a zero vector")
    cosine = np.clip(np.dot(G, grad) / (norm_g * norm_grad), -1.0, 1.0)
    return float(np.degrees(np.arccos(cosine)))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / ||b||, with ||b|| floored at the smallest normal float."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))


# ── SGD baseline ─────────────────────────────────────────────────────────────

def backprop_train(spec: NetworkSpec, dataset: Dataset, eta: float, batch_size: int, epochs: int,
                   seed: int = 0, init_scale: float = 1.0, theta0: np.ndarray | None = None,
                   cost_threshold: float = DEFAULT_COST_THRESHOLD, shuffle: bool = False) -> TrainingTrace:
    """Plain minibatch SGD on the summed MSE. One trace row per epoch (row 0 is the initial state).

    time_to_threshold is the first epoch whose mean dataset cost is below cost_threshold.
    """
    if batch_size < 1 or epochs < 0 or eta < 0:
        raise ValueError(f"invalid SGD settings: eta={eta}, batch_size={batch_size}, epochs={epochs}")
    theta = init_params(spec, seed, init_scale) if theta0 is None else np.array(theta0, dtype=float)
    rng = np.random.default_rng(seed)
    trace = TrainingTrace(stride=1)
    trace.record(0, dataset_cost(spec, theta, dataset), accuracy(spec, theta, dataset), 0.0,
                 theta_checksum(theta))

    grad = np.zeros_like(theta)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(dataset.n) if shuffle else np.arange(dataset.n)
        for start in range(0, dataset.n, batch_size):
            idx = order[start:start + batch_size]
            grad = backprop_grad(spec, theta, dataset.inputs[idx], dataset.targets[idx])
            theta = theta - eta * grad
        cost = dataset_cost(spec, theta, dataset)
        if not (np.isfinite(cost) and np.all(np.isfinite(theta))):
            exc = TrainingAborted(epoch, cost, "SGD diverged")
            exc.trace = trace
            raise exc
        trace.record(epoch, cost, accuracy(spec, theta, dataset), float(np.linalg.norm(grad)),
                     theta_checksum(theta))
        if trace.time_to_threshold is None and cost < cost_threshold:
            trace.converged = True
            trace.time_to_threshold = float(epoch)
            logger.debug("SGD reached cost %.4f at epoch %d", cost, epoch)

    trace.final_cost = trace.costs[-1]
    trace.final_accuracy = trace.accuracies[-1]
    return trace
