"""Dense feed-forward ReLU networks.

A :class:`Network` is an ordered list of alternating :class:`AffineLayer` and
:class:`ReluLayer` objects ending with an affine output layer.  All parameters
can be viewed as one flat float64 vector; the ordering is, for every affine
layer in turn, the row-major weight matrix followed by the bias vector.  Masks
over parameters (``old_param_mask``, ``frozen_mask``) use the same ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when vector/matrix dimensions do not line up with a network."""


@dataclass
class AffineLayer:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"weights have {self.weights.shape[0]} rows but bias has length {self.bias.shape[0]}"
            )

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "AffineLayer":
        return AffineLayer(self.weights.copy(), self.bias.copy())


@dataclass(frozen=True)
class ReluLayer:
    pass


Layer = AffineLayer | ReluLayer


@dataclass
class Network:
    layers: list
    input_dim: int
    old_param_mask: np.ndarray | None = None
    # Parameters that are structurally zero (old neurons never read new ones).
    frozen_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.input_dim <= 0:
            raise ShapeError("input_dim must be positive")
        if not self.layers or not isinstance(self.layers[-1], AffineLayer):
            raise ShapeError("a network must end with an affine output layer")
        width = self.input_dim
        expect_affine = True
        for i, layer in enumerate(self.layers):
            if expect_affine != isinstance(layer, AffineLayer):
                raise ShapeError(f"layer {i}: affine and ReLU layers must alternate")
            if isinstance(layer, AffineLayer):
                if layer.n_in != width:
                    raise ShapeError(f"layer {i}: expected n_in={width}, got {layer.n_in}")
                width = layer.n_out
            elif not isinstance(layer, ReluLayer):
                raise ShapeError(f"layer {i}: unsupported layer type {type(layer).__name__}")
            expect_affine = not expect_affine
        n = self.num_parameters
        for name in ("old_param_mask", "frozen_mask"):
            mask = getattr(self, name)
            if mask is not None:
                mask = np.asarray(mask, dtype=bool).reshape(-1)
                if mask.shape[0] != n:
                    raise ShapeError(f"{name} has length {mask.shape[0]}, expected {n}")
                setattr(self, name, mask)

    @property
    def affine_layers(self) -> list[AffineLayer]:
        return [l for l in self.layers if isinstance(l, AffineLayer)]

    @property
    def affine_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, AffineLayer)]

    @property
    def widths(self) -> list[int]:
        """Width of every layer boundary, index 0 being the input."""
        out = [self.input_dim]
        for layer in self.layers:
            out.append(layer.n_out if isinstance(layer, AffineLayer) else out[-1])
        return out

    @property
    def output_dim(self) -> int:
        return self.layers[-1].n_out

    @property
    def hidden_count(self) -> int:
        return len(self.affine_layers) - 1

    @property
    def num_parameters(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.affine_layers)

    def layout(self) -> list[tuple[int, slice, slice]]:
        """``(layer index, weight slice, bias slice)`` into the flat parameter vector."""
        out = []
        pos = 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, AffineLayer):
                w = slice(pos, pos + layer.weights.size)
                pos += layer.weights.size
                b = slice(pos, pos + layer.bias.size)
                pos += layer.bias.size
                out.append((i, w, b))
        return out

    def parameters(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([l.weights.ravel(), l.bias]) for l in self.affine_layers]
        )

    def with_parameters(self, theta: np.ndarray) -> "Network":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.num_parameters,):
            raise ShapeError(f"parameter vector has shape {theta.shape}, expected ({self.num_parameters},)")
        layers = []
        spans = {i: (w, b) for i, w, b in self.layout()}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, AffineLayer):
                w, b = spans[i]
                layers.append(AffineLayer(theta[w].reshape(layer.weights.shape).copy(), theta[b].copy()))
            else:
                layers.append(layer)
        return Network(layers, self.input_dim, _copy(self.old_param_mask), _copy(self.frozen_mask))

    def copy(self) -> "Network":
        layers = [l.copy() if isinstance(l, AffineLayer) else l for l in self.layers]
        return Network(layers, self.input_dim, _copy(self.old_param_mask), _copy(self.frozen_mask))


def _copy(mask):
    return None if mask is None else mask.copy()


@dataclass
class ForwardTrace:
    """Activations at every layer boundary; ``activations[-1]`` are the logits.

    Each entry is a vector for a single input, or a ``(batch, width)`` matrix
    when the trace was computed for a batch.
    """

    activations: list = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def build_network(input_dim: int, hidden: Sequence[int], output_dim: int, seed: int = 0) -> Network:
    """Freshly initialised network, weights uniform in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    layers: list = []
    n_in = input_dim
    for n_out in list(hidden) + [output_dim]:
        bound = 1.0 / np.sqrt(n_in)
        layers.append(AffineLayer(rng.uniform(-bound, bound, (n_out, n_in)), rng.uniform(-bound, bound, n_out)))
        layers.append(ReluLayer())
        n_in = n_out
    return Network(layers[:-1], input_dim)


def forward(net: Network, x: np.ndarray) -> ForwardTrace:
    """Evaluate ``net`` on one input vector or a ``(batch, input_dim)`` matrix."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim not in (1, 2) or a.shape[-1] != net.input_dim:
        raise ShapeError(f"input has shape {a.shape}, network expects {net.input_dim} features")
    acts = [a]
    for layer in net.layers:
        if isinstance(layer, AffineLayer):
            a = a @ layer.weights.T + layer.bias
        else:
            a = np.maximum(a, 0.0)
        acts.append(a)
    return ForwardTrace(acts)


def predict(net: Network, x: np.ndarray) -> np.ndarray:
    """Labels for a batch of inputs."""
    out = forward(net, np.atleast_2d(x)).output
    return np.argmax(out, axis=1)


def label(logits) -> int:
    """Index of the largest logit; ties go to the lowest index."""
    y = np.asarray(logits, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("cannot label an empty output vector")
    return int(np.argmax(y))


def gradient(net: Network, trace: ForwardTrace, adjoints: Sequence[np.ndarray | None]) -> np.ndarray:
    """Reverse-mode accumulation of d(loss)/d(theta).

    ``adjoints[l]`` is d(loss)/d(activations[l]) for the loss terms that read
    boundary ``l`` directly (``None`` for none), so intermediate-layer
    penalties are injected where they arise.  Batched traces are summed over
    the batch.
    """
    acts = trace.activations
    if len(adjoints) != len(acts) or len(acts) != len(net.layers) + 1:
        raise ShapeError("need one adjoint per layer boundary")
    batched = np.ndim(acts[0]) == 2
    for adj, act in zip(adjoints, acts):
        if adj is not None and np.shape(adj) != np.shape(act):
            raise ShapeError(f"adjoint shape {np.shape(adj)} does not match activation shape {np.shape(act)}")

    grads = {}
    g = None
    for l in range(len(net.layers), 0, -1):
        if adjoints[l] is not None:
            g = adjoints[l] if g is None else g + adjoints[l]
        if g is None:
            continue
        layer = net.layers[l - 1]
        if isinstance(layer, AffineLayer):
            a_in = acts[l - 1]
            if batched:
                grads[l - 1] = (g.T @ a_in, g.sum(axis=0))
            else:
                grads[l - 1] = (np.outer(g, a_in), g.copy())
            g = g @ layer.weights
        else:
            g = g * (acts[l] > 0)

    parts = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, AffineLayer):
            gw, gb = grads.get(i, (np.zeros_like(layer.weights), np.zeros_like(layer.bias)))
            parts.append(gw.ravel())
            parts.append(gb)
    return np.concatenate(parts)


def sgd_step(net: Network, grad: np.ndarray, lr: float) -> Network:
    """One plain gradient step; structurally-zero parameters stay frozen."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (net.num_parameters,):
        raise ShapeError(f"gradient has shape {grad.shape}, expected ({net.num_parameters},)")
    step = lr * grad
    if net.frozen_mask is not None:
        step = np.where(net.frozen_mask, 0.0, step)
    return net.with_parameters(net.parameters() - step)


def grow(
    net: Network,
    hidden_add: Sequence[int],
    output_add: int,
    init_scale: float = 0.1,
    seed: int = 0,
) -> Network:
    """Widen every hidden layer and the output layer.

    Old neurons keep their incoming weights and never read new neurons (the
    corresponding weights are zero and frozen).  New neurons read both old and
    new neurons of the previous layer and are initialised uniformly in
    ``[-init_scale, init_scale]``.
    """
    hidden_add = [int(h) for h in hidden_add]
    if len(hidden_add) != net.hidden_count:
        raise ShapeError(f"need {net.hidden_count} hidden additions, got {len(hidden_add)}")
    if output_add < 0 or any(h < 0 for h in hidden_add):
        raise ValueError("neuron additions must be non-negative")
    rng = np.random.default_rng(seed)
    adds = hidden_add + [int(output_add)]
    old_frozen = net.frozen_mask if net.frozen_mask is not None else np.zeros(net.num_parameters, bool)

    spans = net.layout()
    layers: list = []
    old_parts, frozen_parts = [], []
    add_in = 0
    k = 0
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, AffineLayer):
            layers.append(layer)
            continue
        _, wsl, _ = spans[k]
        add_out = adds[k]
        n_out, n_in = layer.weights.shape
        W = np.zeros((n_out + add_out, n_in + add_in))
        W[:n_out, :n_in] = layer.weights
        W[n_out:, :] = rng.uniform(-init_scale, init_scale, (add_out, n_in + add_in))
        b = np.concatenate([layer.bias, rng.uniform(-init_scale, init_scale, add_out)])
        layers.append(AffineLayer(W, b))

        copied = np.zeros(W.shape, bool)
        copied[:n_out, :n_in] = True
        frozen = np.zeros(W.shape, bool)
        frozen[:n_out, :n_in] = old_frozen[wsl].reshape(n_out, n_in)
        frozen[:n_out, n_in:] = True
        old_parts.append(np.concatenate([copied.ravel(), np.arange(n_out + add_out) < n_out]))
        frozen_parts.append(np.concatenate([frozen.ravel(), np.zeros(n_out + add_out, bool)]))
        add_in = add_out
        k += 1

    return Network(layers, net.input_dim, np.concatenate(old_parts), np.concatenate(frozen_parts))


def subnetwork(net: Network, widths: Sequence[int]) -> Network:
    """Restrict ``net`` to the leading ``widths[l]`` neurons of each boundary.

    Only valid when those neurons never read neurons outside the prefix, which
    :func:`grow` guarantees for the neurons it copies.
    """
    if list(widths[:1]) != [net.input_dim] or len(widths) != len(net.layers) + 1:
        raise ShapeError("widths must cover every layer boundary and start at input_dim")
    layers: list = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, AffineLayer):
            n_out, n_in = widths[i + 1], widths[i]
            if n_out > layer.n_out or n_in > layer.n_in:
                raise ShapeError(f"layer {i}: prefix ({n_out}, {n_in}) exceeds layer shape {layer.weights.shape}")
            if np.any(layer.weights[:n_out, n_in:] != 0):
                raise ShapeError(f"layer {i}: prefix neurons read neurons outside the prefix")
            layers.append(AffineLayer(layer.weights[:n_out, :n_in].copy(), layer.bias[:n_out].copy()))
        else:
            if widths[i + 1] != widths[i]:
                raise ShapeError(f"layer {i}: ReLU cannot change width")
            layers.append(layer)
    return Network(layers, net.input_dim)
