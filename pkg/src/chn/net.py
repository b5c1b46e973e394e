"""Dense network engine: forward pass, backprop from an injected output
residual, and SGD with momentum.

Everything runs in float64. Inputs may be a single vector or a batch
(rows are items); traces and gradients are always batched internally and
gradients are summed over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, InputError, ParseError, ShapeError

ACTIVATIONS = ("relu", "tanh")
MODEL_MAGIC = "CHNM v1"


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if int(self.input_dim) <= 0 or int(self.output_dim) <= 0:
            raise ConfigError(f"layer dims must be positive, got {self.input_dim}->{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= float(self.dropout_rate) < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


@dataclass
class ModalityNet:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    def copy(self) -> "ModalityNet":
        return ModalityNet(list(self.layers), [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        """Flat list ``[W1, b1, W2, b2, ...]`` of the live parameter arrays."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def equals(self, other: "ModalityNet") -> bool:
        return (self.layers == other.layers
                and all(np.array_equal(a, b) for a, b in zip(self.parameters(), other.parameters())))


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    masks: list[np.ndarray | None] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class OptimizerState:
    velocity_w: list[np.ndarray]
    velocity_b: list[np.ndarray]
    learning_rate: float
    momentum: float = 0.9
    fch_lr_mult: float = 1.0

    @classmethod
    def for_net(cls, net: ModalityNet, learning_rate: float, momentum: float = 0.9,
                fch_lr_mult: float = 1.0) -> "OptimizerState":
        if not learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        return cls([np.zeros_like(w) for w in net.weights],
                   [np.zeros_like(b) for b in net.biases],
                   float(learning_rate), float(momentum), float(fch_lr_mult))


def check_specs(specs: Sequence[LayerSpec]) -> None:
    if len(specs) == 0:
        raise ConfigError("a network needs at least one layer")
    for k in range(1, len(specs)):
        if specs[k].input_dim != specs[k - 1].output_dim:
            raise ConfigError(
                f"layer {k} input_dim {specs[k].input_dim} does not chain with "
                f"layer {k - 1} output_dim {specs[k - 1].output_dim}")


def stack_specs(input_dim: int, hidden: Sequence[int], bits: int,
                dropout: float = 0.0) -> list[LayerSpec]:
    """ReLU hidden layers followed by a ``bits``-unit tanh hash layer."""
    dims = [int(input_dim), *map(int, hidden)]
    specs = [LayerSpec(dims[k], dims[k + 1], "relu", dropout) for k in range(len(dims) - 1)]
    specs.append(LayerSpec(dims[-1], int(bits), "tanh", 0.0))
    return specs


def init_network(specs: Sequence[LayerSpec], seed: int) -> ModalityNet:
    """Uniform fan-scaled weights (Glorot), zero biases."""
    check_specs(specs)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in specs:
        s = np.sqrt(6.0 / (spec.input_dim + spec.output_dim))
        weights.append(rng.uniform(-s, s, size=(spec.output_dim, spec.input_dim)))
        biases.append(np.zeros(spec.output_dim))
    return ModalityNet(list(specs), weights, biases)


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(name, z):
    if name == "relu":
        return (z > 0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def _as_batch(net: ModalityNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected input of width {net.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite network input")
    return x


def forward(net: ModalityNet, x, mode: str = "eval", seed: int | None = None) -> ForwardTrace:
    """Run ``x`` through the stack.

    In ``train`` mode, layers with ``dropout_rate > 0`` apply inverted
    dropout to their post-activations with masks drawn from ``seed``.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = _as_batch(net, x)
    inputs = h
    rng = np.random.default_rng(seed) if mode == "train" else None
    pre, post, masks = [], [], []
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        z = h @ w.T + b
        h = _activate(spec.activation, z)
        mask = None
        if rng is not None and spec.dropout_rate > 0:
            keep = 1.0 - spec.dropout_rate
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        pre.append(z)
        post.append(h)
        masks.append(mask)
    return ForwardTrace(inputs, pre, post, masks)


def backward(net: ModalityNet, trace: ForwardTrace, output_residual) -> Gradients:
    """Backpropagate ``output_residual`` (dL/d pre-activation of the last layer).

    Hidden residuals only need the layer above's residual and weights, so
    nothing pairwise is touched below the output layer.
    """
    delta = np.asarray(output_residual, dtype=np.float64)
    if delta.ndim == 1:
        delta = delta[None, :]
    if delta.shape != trace.pre[-1].shape:
        raise ShapeError(f"residual shape {delta.shape} != output shape {trace.pre[-1].shape}")
    n_layers = len(net.layers)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        below = trace.post[k - 1] if k > 0 else trace.inputs
        grad_w[k] = delta.T @ below
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            back = delta @ net.weights[k]
            if trace.masks and trace.masks[k - 1] is not None:
                back = back * trace.masks[k - 1]
            delta = back * _activation_grad(net.layers[k - 1].activation, trace.pre[k - 1])
    return Gradients(grad_w, grad_b)


def sgd_step(net: ModalityNet, grads: Gradients,
             state: OptimizerState) -> tuple[ModalityNet, OptimizerState]:
    """``v <- momentum*v - lr*g``; ``theta <- theta + v``.

    Returns new objects; the inputs are left untouched.
    """
    n_layers = len(net.layers)
    for k in range(n_layers):
        if grads.weights[k].shape != net.weights[k].shape or grads.biases[k].shape != net.biases[k].shape:
            raise ShapeError(f"gradient shape mismatch at layer {k}")
        if not (np.all(np.isfinite(grads.weights[k])) and np.all(np.isfinite(grads.biases[k]))):
            raise DivergenceError(f"non-finite gradient in layer {k}", checkpoint=net, layer=k)
    new_w, new_b, vel_w, vel_b = [], [], [], []
    for k in range(n_layers):
        lr = state.learning_rate * (state.fch_lr_mult if k == n_layers - 1 else 1.0)
        vw = state.momentum * state.velocity_w[k] - lr * grads.weights[k]
        vb = state.momentum * state.velocity_b[k] - lr * grads.biases[k]
        vel_w.append(vw)
        vel_b.append(vb)
        new_w.append(net.weights[k] + vw)
        new_b.append(net.biases[k] + vb)
    new_state = OptimizerState(vel_w, vel_b, state.learning_rate, state.momentum, state.fch_lr_mult)
    return ModalityNet(list(net.layers), new_w, new_b), new_state


# -- model files -------------------------------------------------------------

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def dumps_model(net: ModalityNet) -> str:
    lines = [MODEL_MAGIC, f"layers={len(net.layers)}"]
    for i, (spec, w, b) in enumerate(zip(net.layers, net.weights, net.biases)):
        lines.append(f"layer {i} {spec.input_dim} {spec.output_dim} {spec.activation} "
                     f"{repr(float(spec.dropout_rate))}")
        lines.append("W")
        lines.extend(_fmt(row) for row in w)
        lines.append("b")
        lines.append(_fmt(b))
    return "\n".join(lines) + "\n"


def loads_model(text: str, path=None) -> ModalityNet:
    lines = text.splitlines()
    pos = 0

    def take(what):
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(f"unexpected end of file, expected {what}", path, pos + 1)
        pos += 1
        return lines[pos - 1]

    def floats(line, count):
        try:
            vals = [float(t) for t in line.split()]
        except ValueError:
            raise ParseError("non-numeric token", path, pos) from None
        if len(vals) != count:
            raise ParseError(f"expected {count} values, found {len(vals)}", path, pos)
        return vals

    if take("header").strip() != MODEL_MAGIC:
        raise ParseError(f"missing '{MODEL_MAGIC}' header", path, 1)
    head = take("layer count").strip()
    if not head.startswith("layers="):
        raise ParseError("expected layers=<k>", path, pos)
    try:
        n_layers = int(head[len("layers="):])
    except ValueError:
        raise ParseError("bad layer count", path, pos) from None
    specs, weights, biases = [], [], []
    for i in range(n_layers):
        parts = take("layer line").split()
        if len(parts) != 6 or parts[0] != "layer" or parts[1] != str(i):
            raise ParseError(f"expected 'layer {i} <in> <out> <activation> <dropout>'", path, pos)
        try:
            spec = LayerSpec(int(parts[2]), int(parts[3]), parts[4], float(parts[5]))
        except (ValueError, ConfigError) as exc:
            raise ParseError(f"bad layer line: {exc}", path, pos) from None
        if take("W").strip() != "W":
            raise ParseError("expected 'W'", path, pos)
        w = np.array([floats(take("weight row"), spec.input_dim) for _ in range(spec.output_dim)])
        if take("b").strip() != "b":
            raise ParseError("expected 'b'", path, pos)
        b = np.array(floats(take("bias row"), spec.output_dim))
        specs.append(spec)
        weights.append(w.reshape(spec.output_dim, spec.input_dim))
        biases.append(b)
    try:
        check_specs(specs)
    except ConfigError as exc:
        raise ParseError(str(exc), path) from None
    if not all(np.all(np.isfinite(p)) for p in weights + biases):
        raise ParseError("non-finite parameter", path)
    return ModalityNet(specs, weights, biases)


def save_model(path, net: ModalityNet) -> None:
    Path(path).write_text(dumps_model(net), encoding="utf-8")


def load_model(path) -> ModalityNet:
    return loads_model(Path(path).read_text(encoding="utf-8"), path=str(path))
