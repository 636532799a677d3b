"""Small tanh feedforward networks over a flat parameter vector.

Parameters are stored layer by layer; each layer contributes its weight
matrix (shape ``(fan_out, fan_in)``, row-major) followed by its bias. A
layer computes ``W @ x + b``; hidden layers apply ``tanh``, the output layer
is linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Input or parameter dimensions do not match a network spec."""


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_layers: int
    hidden_width: int
    output_dim: int
    hidden_activation: str = "tanh"
    output_activation: str = "linear"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.hidden_layers > 0 and self.hidden_width < 1:
            raise ValueError("hidden_width must be positive")
        if self.hidden_activation != "tanh":
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation != "linear":
            raise ValueError(f"unsupported output activation {self.output_activation!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    @property
    def parameter_count(self) -> int:
        sizes = self.layer_sizes
        return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))


def parameter_count(spec: NetSpec) -> int:
    return spec.parameter_count


def unflatten(spec: NetSpec, params) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into ``[(W, b), ...]`` views, one per layer."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != spec.parameter_count:
        raise ShapeError(
            f"expected {spec.parameter_count} parameters, got shape {params.shape}"
        )
    layers = []
    offset = 0
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = params[offset:offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def flatten(layers) -> np.ndarray:
    parts = []
    for W, b in layers:
        parts.append(np.asarray(W, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def _as_batch(spec: NetSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(
            f"layer 0 (input): expected {spec.input_dim} features, got shape {x.shape}"
        )
    return X, single


def _forward_cache(spec, params, X):
    layers = unflatten(spec, params)
    acts = [X]
    h = X
    last = len(layers) - 1
    for idx, (W, b) in enumerate(layers):
        z = h @ W.T + b
        h = z if idx == last else np.tanh(z)
        acts.append(h)
    return layers, acts


def forward(spec: NetSpec, params, x) -> np.ndarray:
    """Evaluate the network on one input vector or on a batch (rows)."""
    X, single = _as_batch(spec, x)
    _, acts = _forward_cache(spec, params, X)
    out = acts[-1]
    return out[0] if single else out


def backward(spec: NetSpec, params, x, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * forward(x))``.

    Returns ``(grad_params, grad_x)``. For a batch input, ``upstream`` has one
    row per input, ``grad_params`` is summed over the batch and ``grad_x`` has
    the shape of ``x``.
    """
    X, single = _as_batch(spec, x)
    G = np.asarray(upstream, dtype=np.float64)
    if single:
        G = G[None, :] if G.ndim == 1 else G
    if G.shape != (X.shape[0], spec.output_dim):
        raise ShapeError(
            f"layer {len(spec.layer_sizes) - 1} (output): upstream shape {G.shape} "
            f"does not match ({X.shape[0]}, {spec.output_dim})"
        )
    layers, acts = _forward_cache(spec, params, X)
    grads = []
    delta = G
    for idx in range(len(layers) - 1, -1, -1):
        W, _ = layers[idx]
        h_in = acts[idx]
        grads.append((delta.T @ h_in, delta.sum(axis=0)))
        delta = delta @ W
        if idx > 0:
            delta = delta * (1.0 - h_in ** 2)
    grads.reverse()
    grad_params = flatten(grads)
    return grad_params, (delta[0] if single else delta)
