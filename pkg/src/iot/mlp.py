"""Minimal feedforward networks with hand-written reverse-mode gradients.

Layers are affine maps followed by one of: identity, ReLU, leaky ReLU, or a
log-softmax output (final layer only). Forward passes return an explicit
cache so backward evaluation is re-entrant; parameters are never mutated by
forward/backward. Inputs may be a single vector (dim,) or a batch
(batch, dim); batch weight gradients are summed over rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "relu", "leaky_relu", "log_softmax")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "identity"
    slope: float = 0.0  # leaky_relu negative-side slope

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class MLPParams:
    layers: list
    weights: list = field(repr=False)  # per layer, shape (out_dim, in_dim)
    biases: list = field(repr=False)  # per layer, shape (out_dim,)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim


def mlp_spec(dims, hidden_activation="relu", output="identity", slope=0.0):
    """LayerSpec chain for dims [d0, d1, ..., dk]; hidden layers share one
    activation, the final layer uses `output`."""
    if len(dims) < 2:
        raise ValueError("need at least an input and an output dimension")
    specs = []
    for i in range(len(dims) - 1):
        act = output if i == len(dims) - 2 else hidden_activation
        specs.append(LayerSpec(dims[i], dims[i + 1], act, slope))
    return specs


def init_mlp(specs, rng):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights and biases."""
    if not specs:
        raise ValueError("empty layer spec")
    for a, b in zip(specs[:-1], specs[1:]):
        if a.out_dim != b.in_dim:
            raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
    for s in specs[:-1]:
        if s.activation == "log_softmax":
            raise ValueError("log_softmax is only permitted as the final layer")
    weights, biases = [], []
    for s in specs:
        bound = 1.0 / np.sqrt(s.in_dim)
        weights.append(rng.uniform(-bound, bound, size=(s.out_dim, s.in_dim)))
        biases.append(rng.uniform(-bound, bound, size=s.out_dim))
    return MLPParams(list(specs), weights, biases)


def zero_mlp(specs):
    """All-zero parameters (handy for constant-output heads)."""
    return MLPParams(
        list(specs),
        [np.zeros((s.out_dim, s.in_dim)) for s in specs],
        [np.zeros(s.out_dim) for s in specs],
    )


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations saved by mlp_forward.
    Valid only for the exact parameters that produced it."""

    inputs: list
    preacts: list
    squeezed: bool


def _apply_activation(spec, z):
    if spec.activation == "identity":
        return z
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    if spec.activation == "leaky_relu":
        return np.where(z > 0.0, z, spec.slope * z)
    # log_softmax over the feature axis
    zmax = np.max(z, axis=-1, keepdims=True)
    return z - zmax - np.log(np.sum(np.exp(z - zmax), axis=-1, keepdims=True))


def _activation_backward(spec, z, out, grad_out):
    if spec.activation == "identity":
        return grad_out
    if spec.activation == "relu":
        return grad_out * (z > 0.0)
    if spec.activation == "leaky_relu":
        return grad_out * np.where(z > 0.0, 1.0, spec.slope)
    # d log_softmax: dz = dy - softmax(z) * sum(dy)
    p = np.exp(out)
    return grad_out - p * np.sum(grad_out, axis=-1, keepdims=True)


def mlp_forward(params, x):
    """Returns (output, cache). `x` is (in_dim,) or (batch, in_dim)."""
    a = np.asarray(x, dtype=float)
    squeezed = a.ndim == 1
    if squeezed:
        a = a[None, :]
    if a.shape[1] != params.in_dim:
        raise ValueError(f"input dim {a.shape[1]} != expected {params.in_dim}")
    inputs, preacts = [], []
    for spec, w, b in zip(params.layers, params.weights, params.biases):
        inputs.append(a)
        z = a @ w.T + b
        preacts.append(z)
        a = _apply_activation(spec, z)
    out = a[0] if squeezed else a
    return out, ForwardCache(inputs, preacts, squeezed)


def mlp_backward(params, cache, grad_output):
    """Reverse-mode pass. Returns (grad_weights, grad_biases, grad_input).

    `grad_output` must match the forward output's shape; batch weight
    gradients are summed over the batch. ReLU uses subgradient 0 at 0.
    """
    g = np.asarray(grad_output, dtype=float)
    if cache.squeezed:
        g = g[None, :]
    if g.shape != (cache.inputs[0].shape[0], params.out_dim):
        raise ValueError("grad_output shape does not match the cached forward pass")
    grad_w = [None] * len(params.layers)
    grad_b = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        spec = params.layers[i]
        z = cache.preacts[i]
        out = _apply_activation(spec, z) if spec.activation == "log_softmax" else None
        gz = _activation_backward(spec, z, out, g)
        grad_w[i] = gz.T @ cache.inputs[i]
        grad_b[i] = np.sum(gz, axis=0)
        g = gz @ params.weights[i]
    grad_input = g[0] if cache.squeezed else g
    return grad_w, grad_b, grad_input


def mlp_param_list(params):
    """Flat list of parameter arrays (weights then biases, layer order)."""
    return list(params.weights) + list(params.biases)


def mlp_grad_list(grad_w, grad_b):
    return list(grad_w) + list(grad_b)
