"""Dense-network primitives: forward pass, exact reverse-mode gradients,
Adam updates, and flat parameter vectors.

Everything is float64. Inputs may be a single vector ``(in_dim,)`` or a
batch ``(n, in_dim)``; outputs follow the input's rank. Parameter
gradients returned by ``backward`` are summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError, StateError

ACTIVATIONS = ("tanh", "relu", "identity", "softmax")


def glorot_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 2:
        fan_out, fan_in = shape
    else:
        fan_out, fan_in = shape[0], shape[0]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_block(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Fresh values for a named parameter block: Glorot weights, zero biases."""
    if name.endswith(".b"):
        return np.zeros(shape)
    return glorot_uniform(shape, rng)


@dataclass(frozen=True)
class ParamSlot:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def build_layout(entries: list[tuple[str, tuple[int, ...]]]) -> tuple[ParamSlot, ...]:
    slots = []
    offset = 0
    for name, shape in entries:
        slots.append(ParamSlot(name, tuple(shape), offset))
        offset += int(np.prod(shape))
    return tuple(slots)


def layout_size(layout: tuple[ParamSlot, ...]) -> int:
    if not layout:
        return 0
    last = layout[-1]
    return last.offset + last.size


@dataclass
class ParamVector:
    """Flat view of a parameter set plus the (name, shape, offset) layout."""

    values: np.ndarray
    layout: tuple[ParamSlot, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("ParamVector values must be 1-D")
        if self.values.size != layout_size(self.layout):
            raise ShapeError(
                f"values length {self.values.size} != layout size {layout_size(self.layout)}"
            )

    def block(self, name: str) -> np.ndarray:
        for slot in self.layout:
            if slot.name == name:
                return self.values[slot.offset : slot.offset + slot.size].reshape(slot.shape)
        raise KeyError(name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


class DenseLayer:
    """y = act(W x + b) with W of shape (out_dim, in_dim)."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: str):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.ndim != 1 or weights.shape[0] != bias.shape[0]:
            raise ShapeError(f"bad layer shapes W{weights.shape} b{bias.shape}")
        if weights.shape[0] < 1 or weights.shape[1] < 1:
            raise ShapeError("layer dims must be >= 1")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weights = weights
        self.bias = bias
        self.activation = activation

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


def _apply_activation(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    # softmax over the last axis, shifted for stability
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _activation_backward(grad_out: np.ndarray, z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return grad_out * (1.0 - a * a)
    if kind == "relu":
        return grad_out * (z > 0.0)
    if kind == "identity":
        return grad_out
    # softmax jacobian: dz = a * (g - <g, a>)
    dot = (grad_out * a).sum(axis=-1, keepdims=True)
    return a * (grad_out - dot)


@dataclass
class GradTape:
    """Per-layer forward cache consumed by the backward pass."""

    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def clear(self):
        self.inputs.clear()
        self.preacts.clear()
        self.outputs.clear()

    @property
    def recorded(self) -> bool:
        return bool(self.inputs)


class Mlp:
    """Chain of DenseLayers; adjacent dimensions must match and softmax is
    only allowed as the final activation."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ShapeError("Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer chain broken: {prev.out_dim} -> {nxt.in_dim}"
                )
        for layer in layers[:-1]:
            if layer.activation == "softmax":
                raise ValueError("softmax allowed only on the final layer")
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @classmethod
    def init(cls, dims: list[int], activations: list[str], rng: np.random.Generator) -> "Mlp":
        """Fresh network for the dim chain dims[0] -> ... -> dims[-1]."""
        if len(dims) < 2 or len(activations) != len(dims) - 1:
            raise ShapeError("need len(dims) >= 2 and one activation per layer")
        layers = []
        for i, act in enumerate(activations):
            w = glorot_uniform((dims[i + 1], dims[i]), rng)
            b = np.zeros(dims[i + 1])
            layers.append(DenseLayer(w, b, act))
        return cls(layers)

    def forward(self, x: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input dim {x.shape[-1]} != net in_dim {self.in_dim}")
        if tape is not None:
            tape.clear()
        a = x
        for layer in self.layers:
            z = a @ layer.weights.T + layer.bias
            out = _apply_activation(z, layer.activation)
            if tape is not None:
                tape.inputs.append(a)
                tape.preacts.append(z)
                tape.outputs.append(out)
            a = out
        return a[0] if squeeze else a

    def backward(self, tape: GradTape, output_grad: np.ndarray):
        """Returns ([(dW, db) per layer], input_grad).

        Parameter gradients are summed over the batch; input_grad matches
        the rank of the recorded forward input.
        """
        if tape is None or not tape.recorded:
            raise StateError("backward requires a tape holding a forward pass")
        if len(tape.inputs) != len(self.layers):
            raise StateError("tape does not match this network")
        g = np.asarray(output_grad, dtype=np.float64)
        squeeze = g.ndim == 1
        if squeeze:
            g = g[None, :]
        if g.shape[-1] != self.out_dim:
            raise ShapeError(f"output_grad dim {g.shape[-1]} != net out_dim {self.out_dim}")
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dz = _activation_backward(g, tape.preacts[i], tape.outputs[i], layer.activation)
            grads[i] = (dz.T @ tape.inputs[i], dz.sum(axis=0))
            g = dz @ layer.weights
        return grads, (g[0] if squeeze else g)

    def param_entries(self, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
        entries = []
        for i, layer in enumerate(self.layers):
            entries.append((f"{prefix}.{i}.W", layer.weights.shape))
            entries.append((f"{prefix}.{i}.b", layer.bias.shape))
        return entries


def mlp_forward(net: Mlp, x: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    return net.forward(x, tape)


def mlp_backward(net: Mlp, tape: GradTape, output_grad: np.ndarray):
    """Spec-level wrapper returning (gradient ParamVector, input gradient)."""
    grads, input_grad = net.backward(tape, output_grad)
    flat = np.concatenate([np.concatenate([dw.ravel(), db.ravel()]) for dw, db in grads])
    layout = build_layout(net.param_entries("net"))
    return ParamVector(flat, layout), input_grad


def flatten_params(net: Mlp, prefix: str = "net") -> ParamVector:
    layout = build_layout(net.param_entries(prefix))
    flat = np.concatenate(
        [np.concatenate([l.weights.ravel(), l.bias.ravel()]) for l in net.layers]
    )
    return ParamVector(flat, layout)


def unflatten_params(params: ParamVector, net: Mlp) -> Mlp:
    """Writes a flat vector back into the network's arrays (in place)."""
    expected = build_layout(net.param_entries(params.layout[0].name.split(".")[0]))
    if tuple((s.shape, s.offset) for s in params.layout) != tuple(
        (s.shape, s.offset) for s in expected
    ):
        raise ShapeError("ParamVector layout does not match network architecture")
    i = 0
    for layer in net.layers:
        w, b = params.layout[i], params.layout[i + 1]
        layer.weights[...] = params.values[w.offset : w.offset + w.size].reshape(w.shape)
        layer.bias[...] = params.values[b.offset : b.offset + b.size].reshape(b.shape)
        i += 2
    return net


@dataclass
class AdamState:
    """First/second moment buffers plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_update(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> None:
    """In-place Adam step with bias correction on flat arrays."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError("params, grads and moments must share one layout")
    state.t += 1
    state.m *= ADAM_BETA1
    state.m += (1.0 - ADAM_BETA1) * grads
    state.v *= ADAM_BETA2
    state.v += (1.0 - ADAM_BETA2) * grads * grads
    m_hat = state.m / (1.0 - ADAM_BETA1 ** state.t)
    v_hat = state.v / (1.0 - ADAM_BETA2 ** state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState, lr: float) -> ParamVector:
    if tuple((s.shape, s.offset) for s in params.layout) != tuple(
        (s.shape, s.offset) for s in grads.layout
    ):
        raise ShapeError("params and grads layouts differ")
    adam_update(params.values, grads.values, state, lr)
    return params
