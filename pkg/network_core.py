"""
network_core.py
Layered feedforward networks evaluated as black boxes over a single flat parameter vector.

Flat layout: layers in order; for each parametric layer its weights row-major,
then its biases. Dense weights are (out, in); conv3x3 weights are (out, in, 3, 3).
Image inputs are channel-first (C, H, W).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from math import prod
from typing import TYPE_CHECKING, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from file_store import atomic_write_bytes

if TYPE_CHECKING:
    from imperfections import DefectTable
    from tasks_data import Dataset

ParamVector = np.ndarray

_EVAL_CHUNK = 2048


class ShapeError(ValueError):
    """Input, target or parameter shape does not match the network."""


class LayerKind(Enum):
    DENSE = "dense"
    CONV3X3 = "conv3x3"
    MAXPOOL2X2 = "maxpool2x2"
    FLATTEN = "flatten"


class Activation(Enum):
    SIGMOID = "sigmoid"
    RELU = "relu"
    LINEAR = "linear"
    DEFECT_LOGISTIC = "defect_logistic"


_PARAMETRIC = (LayerKind.DENSE, LayerKind.CONV3X3)


# ── Layer and network specs ──────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class LayerSpec:
    kind: LayerKind
    n_in: int = 0     # dense: input width, conv: input channels
    n_out: int = 0    # dense: output width, conv: output channels
    activation: Activation = Activation.LINEAR
    defects: DefectTable | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.kind in _PARAMETRIC and (self.n_in < 1 or self.n_out < 1):
            raise ValueError(f"{self.kind.value} layer needs positive widths, got {self.n_in}->{self.n_out}")
        if self.kind is LayerKind.CONV3X3 and self.activation is not Activation.RELU:
            raise ValueError("conv3x3 layers use relu output")
        if self.activation is Activation.DEFECT_LOGISTIC:
            if self.kind is not LayerKind.DENSE:
                raise ValueError("defect_logistic is only defined for dense layers")
            if self.defects is None or len(self.defects) != self.n_out:
                raise ValueError("defect_logistic layer needs one defect entry per output neuron")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind is LayerKind.DENSE:
            return (self.n_out, self.n_in)
        if self.kind is LayerKind.CONV3X3:
            return (self.n_out, self.n_in, 3, 3)
        return ()

    @property
    def param_count(self) -> int:
        if self.kind not in _PARAMETRIC:
            return 0
        return prod(self.weight_shape) + self.n_out

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape produced from a single-sample input of `input_shape`."""
        if self.kind is LayerKind.DENSE:
            if input_shape != (self.n_in,):
                raise ShapeError(f"dense expects ({self.n_in},), got {input_shape}")
            return (self.n_out,)
        if self.kind is LayerKind.CONV3X3:
            if len(input_shape) != 3 or input_shape[0] != self.n_in:
                raise ShapeError(f"conv3x3 expects ({self.n_in}, H, W), got {input_shape}")
            _, h, w = input_shape
            if h < 3 or w < 3:
                raise ShapeError(f"conv3x3 needs at least 3x3 input, got {h}x{w}")
            return (self.n_out, h - 2, w - 2)
        if self.kind is LayerKind.MAXPOOL2X2:
            if len(input_shape) != 3 or input_shape[1] < 2 or input_shape[2] < 2:
                raise ShapeError(f"maxpool2x2 expects (C, H>=2, W>=2), got {input_shape}")
            c, h, w = input_shape
            return (c, h // 2, w // 2)
        return (prod(input_shape),)


def dense(n_in: int, n_out: int, activation: Activation | str = Activation.SIGMOID) -> LayerSpec:
    return LayerSpec(LayerKind.DENSE, n_in, n_out, Activation(activation))


def conv3x3(in_channels: int, out_channels: int) -> LayerSpec:
    return LayerSpec(LayerKind.CONV3X3, in_channels, out_channels, Activation.RELU)


def maxpool2x2() -> LayerSpec:
    return LayerSpec(LayerKind.MAXPOOL2X2)


def flatten() -> LayerSpec:
    return LayerSpec(LayerKind.FLATTEN)


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    output_size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.layers:
            raise ShapeError("network needs at least one layer")

        shapes = [self.input_shape]
        for k, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {k} ({layer.kind.value}): {exc}") from None
        if len(shapes[-1]) != 1:
            raise ShapeError(f"network must end in a flat output, got shape {shapes[-1]}")
        if self.output_size == 0:
            object.__setattr__(self, "output_size", shapes[-1][0])
        elif self.output_size != shapes[-1][0]:
            raise ShapeError(f"output_size {self.output_size} != last layer width {shapes[-1][0]}")
        object.__setattr__(self, "_shapes", tuple(shapes))

    @property
    def layer_shapes(self) -> tuple[tuple[int, ...], ...]:
        """Input shape followed by the output shape of every layer."""
        return self._shapes

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def describe(self) -> str:
        parts = []
        for layer, shape in zip(self.layers, self._shapes[1:]):
            parts.append(f"{layer.kind.value}{tuple(shape)}")
        return " -> ".join(parts) + f"  [P={self.param_count}]"


def feedforward_spec(sizes: list[int], activation: Activation | str = Activation.SIGMOID,
                     output_activation: Activation | str | None = None) -> NetworkSpec:
    """Fully connected network, e.g. sizes=[2, 2, 1] for the 9-parameter XOR net."""
    if len(sizes) < 2:
        raise ValueError("feedforward network needs at least input and output sizes")
    output_activation = activation if output_activation is None else output_activation
    layers = []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        layers.append(dense(n_in, n_out, output_activation if last else activation))
    return NetworkSpec(tuple(layers), (sizes[0],))


def fashion_cnn_spec(n_classes: int = 10) -> NetworkSpec:
    """Two conv/pool stages (16, 32 channels) and a dense readout on 28x28 grayscale."""
    layers = (
        conv3x3(1, 16), maxpool2x2(),
        conv3x3(16, 32), maxpool2x2(),
        flatten(),
        dense(32 * 5 * 5, n_classes, Activation.SIGMOID),
    )
    return NetworkSpec(layers, (1, 28, 28))


def cifar_cnn_spec(n_classes: int = 10) -> NetworkSpec:
    """Three conv/pool stages (16, 32, 64 channels); 32x32 RGB reduces to 256 features."""
    layers = (
        conv3x3(3, 16), maxpool2x2(),
        conv3x3(16, 32), maxpool2x2(),
        conv3x3(32, 64), maxpool2x2(),
        flatten(),
        dense(64 * 2 * 2, n_classes, Activation.SIGMOID),
    )
    return NetworkSpec(layers, (3, 32, 32))


# ── Parameters ───────────────────────────────────────────────────────────────

def init_params(spec: NetworkSpec, seed: int, scale: float = 1.0) -> ParamVector:
    if scale <= 0:
        raise ValueError(f"init scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale, scale, size=spec.param_count)


def unpack_params(spec: NetworkSpec, theta: ParamVector) -> list[tuple[np.ndarray, np.ndarray] | None]:
    """Per-layer (weights, biases) views into theta; None for non-parametric layers."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.param_count,):
        raise ShapeError(f"parameter vector has shape {theta.shape}, network needs ({spec.param_count},)")
    out = []
    offset = 0
    for layer in spec.layers:
        if layer.kind not in _PARAMETRIC:
            out.append(None)
            continue
        n_w = prod(layer.weight_shape)
        weights = theta[offset:offset + n_w].reshape(layer.weight_shape)
        biases = theta[offset + n_w:offset + n_w + layer.n_out]
        out.append((weights, biases))
        offset += layer.param_count
    return out


def save_params(path, theta: ParamVector) -> None:
    """8-byte little-endian P header, then P little-endian float64 values."""
    theta = np.asarray(theta, dtype=float).ravel()
    payload = struct.pack("<Q", theta.size) + theta.astype("<f8").tobytes()
    atomic_write_bytes(path, payload)


def load_params(path, spec: NetworkSpec | None = None) -> ParamVector:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise ShapeError(f"{path}: truncated header ({len(raw)} bytes)")
    (count,) = struct.unpack_from("<Q", raw, 0)
    if len(raw) != 8 + 8 * count:
        raise ShapeError(f"{path}: header says {count} values but payload has {len(raw) - 8} bytes")
    if spec is not None and count != spec.param_count:
        raise ShapeError(f"{path}: holds {count} parameters, network needs {spec.param_count}")
    return np.frombuffer(raw, dtype="<f8", count=count, offset=8).astype(float)


# ── Forward evaluation ───────────────────────────────────────────────────────

class LayerTrace(NamedTuple):
    inputs: np.ndarray
    pre_activation: np.ndarray | None
    output: np.ndarray


def activate(layer: LayerSpec, z: np.ndarray) -> np.ndarray:
    if layer.activation is Activation.SIGMOID:
        return expit(z)
    if layer.activation is Activation.RELU:
        return np.maximum(z, 0.0)
    if layer.activation is Activation.DEFECT_LOGISTIC:
        return layer.defects.activate(z)
    return z


def activation_grad(layer: LayerSpec, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    """d activation / d z; relu uses subgradient 0 at z = 0."""
    if layer.activation is Activation.SIGMOID:
        return out * (1.0 - out)
    if layer.activation is Activation.RELU:
        return (z > 0.0).astype(float)
    if layer.activation is Activation.DEFECT_LOGISTIC:
        return layer.defects.derivative(z)
    return np.ones_like(z)


def _conv_valid(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    windows = sliding_window_view(x, (3, 3), axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", windows, weights, optimize=True)


def _maxpool(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    trimmed = x[:, :, :2 * h2, :2 * w2]
    return trimmed.reshape(n, c, h2, 2, w2, 2).max(axis=(3, 5))


def _check_batch(spec: NetworkSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[1:] != spec.input_shape or X.ndim != len(spec.input_shape) + 1:
        raise ShapeError(f"batch has shape {X.shape}, network expects (N, *{spec.input_shape})")
    return X


def forward_trace(spec: NetworkSpec, theta: ParamVector, X: np.ndarray) -> list[LayerTrace]:
    """Layer-by-layer record of a batch forward pass (inputs, pre-activation, output)."""
    X = _check_batch(spec, X)
    params = unpack_params(spec, theta)
    trace = []
    h = X
    for layer, p in zip(spec.layers, params):
        if layer.kind is LayerKind.DENSE:
            weights, biases = p
            z = h @ weights.T + biases
            out = activate(layer, z)
        elif layer.kind is LayerKind.CONV3X3:
            weights, biases = p
            z = _conv_valid(h, weights) + biases[None, :, None, None]
            out = activate(layer, z)
        elif layer.kind is LayerKind.MAXPOOL2X2:
            z, out = None, _maxpool(h)
        else:
            z, out = None, h.reshape(h.shape[0], -1)
        trace.append(LayerTrace(h, z, out))
        h = out
    return trace


def forward_batch(spec: NetworkSpec, theta: ParamVector, X: np.ndarray) -> np.ndarray:
    """Outputs for a stack of samples, shape (N, output_size)."""
    return forward_trace(spec, theta, X)[-1].output


def forward(spec: NetworkSpec, theta: ParamVector, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != spec.input_shape:
        raise ShapeError(f"input has shape {x.shape}, network expects {spec.input_shape}")
    return forward_batch(spec, theta, x[None])[0]


# ── Cost and accuracy ────────────────────────────────────────────────────────

def cost_mse(y: np.ndarray, y_hat: np.ndarray) -> float:
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y.shape != y_hat.shape:
        raise ShapeError(f"output length {y.size} != target length {y_hat.size}")
    return float(np.mean((y - y_hat) ** 2))


def sample_costs(spec: NetworkSpec, theta: ParamVector, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Per-sample MSE for a batch."""
    out = forward_batch(spec, theta, X)
    Y = np.asarray(Y, dtype=float)
    if Y.shape != out.shape:
        raise ShapeError(f"targets have shape {Y.shape}, outputs have shape {out.shape}")
    return np.mean((out - Y) ** 2, axis=1)


def batch_cost(spec: NetworkSpec, theta: ParamVector, X: np.ndarray, Y: np.ndarray) -> float:
    """Summed per-sample MSE: the cost of one parallel batch."""
    return float(np.sum(sample_costs(spec, theta, X, Y)))


def _chunks(n: int, size: int = _EVAL_CHUNK):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def dataset_cost(spec: NetworkSpec, theta: ParamVector, dataset: Dataset) -> float:
    """Mean per-sample MSE over the whole dataset."""
    total = 0.0
    for sl in _chunks(dataset.n):
        total += batch_cost(spec, theta, dataset.inputs[sl], dataset.targets[sl])
    return total / dataset.n


def predict_labels(outputs: np.ndarray) -> np.ndarray:
    """Class index per row; single-output rows threshold at 0.5. argmax ties go to the lowest index."""
    if outputs.shape[1] == 1:
        return (outputs[:, 0] >= 0.5).astype(int)
    return np.argmax(outputs, axis=1)


def accuracy(spec: NetworkSpec, theta: ParamVector, dataset: Dataset) -> float:
    if dataset.n == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    correct = 0
    for sl in _chunks(dataset.n):
        out = forward_batch(spec, theta, dataset.inputs[sl])
        correct += int(np.sum(predict_labels(out) == predict_labels(dataset.targets[sl])))
    return correct / dataset.n
