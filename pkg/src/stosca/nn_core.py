"""Feed-forward MLP with a flat parameter vector.

Parameter layout (fixed, relied upon by block partitions): layers are stored
in order; for each layer the weight matrix of shape ``(n_in, n_out)`` is laid
out row-major, followed by the bias vector of length ``n_out``.  A hidden
layer computes ``h @ W + b`` followed by the activation; the last layer is
affine (the "pre-squash" output), optionally followed by a sigmoid head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .objective import LossKind, loss_derivative_pre

# Only continuously differentiable activations are admitted.
_ACTIVATIONS = {
    "tanh": (np.tanh, lambda h: 1.0 - h * h),
    "logistic": (lambda a: 0.5 * (1.0 + np.tanh(0.5 * a)), lambda h: h * (1.0 - h)),
}

HEADS = ("identity", "sigmoid")


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces inf/nan."""


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


@dataclass(frozen=True)
class Topology:
    layer_sizes: tuple[int, ...]

    def __init__(self, layer_sizes: Sequence[int]):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2:
            raise ValueError("a topology needs at least an input and an output layer")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] != 1:
            raise ValueError("only single-output networks are supported")
        object.__setattr__(self, "layer_sizes", sizes)

    @classmethod
    def parse(cls, text: str) -> "Topology":
        """Parse the ``"9/10/6/1"`` notation."""
        return cls([int(t) for t in text.split("/")])

    def __str__(self) -> str:
        return "/".join(str(s) for s in self.layer_sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum((s[k] + 1) * s[k + 1] for k in range(len(s) - 1))

    def layer_slices(self) -> list[tuple[slice, slice]]:
        """(weight slice, bias slice) into the flat vector for every layer."""
        out = []
        pos = 0
        s = self.layer_sizes
        for k in range(len(s) - 1):
            nw = s[k] * s[k + 1]
            out.append((slice(pos, pos + nw), slice(pos + nw, pos + nw + s[k + 1])))
            pos += nw + s[k + 1]
        return out

    def neuron_groups(self) -> list[np.ndarray]:
        """Index groups of weights outgoing from each neuron (input and hidden
        units), plus one group per layer holding its biases.

        The groups partition ``{0..Q-1}`` and are the natural choice for
        group-sparse penalties that prune whole neurons.
        """
        groups = []
        s = self.layer_sizes
        for (ws, bs), (n_in, n_out) in zip(self.layer_slices(), zip(s[:-1], s[1:])):
            base = ws.start
            for i in range(n_in):
                groups.append(np.arange(base + i * n_out, base + (i + 1) * n_out))
            groups.append(np.arange(bs.start, bs.stop))
        return groups


def unpack(topology: Topology, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into ``[(W_k, b_k), ...]`` (views, no copies)."""
    w = np.asarray(w)
    if w.shape != (topology.n_params,):
        raise ValueError(f"expected {topology.n_params} parameters, got shape {w.shape}")
    s = topology.layer_sizes
    return [
        (w[ws].reshape(s[k], s[k + 1]), w[bs])
        for k, (ws, bs) in enumerate(topology.layer_slices())
    ]


def pack(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


@dataclass(frozen=True)
class MlpModel:
    topology: Topology
    w: np.ndarray
    head: str = "identity"
    activation: str = "tanh"

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        if w.shape != (self.topology.n_params,):
            raise ValueError(
                f"weight vector has length {w.size}, topology {self.topology} needs "
                f"{self.topology.n_params}"
            )
        if self.head not in HEADS:
            raise ValueError(f"unknown output head {self.head!r}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(
                f"activation {self.activation!r} is not admitted; only continuously "
                f"differentiable activations are supported: {sorted(_ACTIVATIONS)}"
            )
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n_params(self) -> int:
        return self.topology.n_params

    def with_weights(self, w: np.ndarray) -> "MlpModel":
        return MlpModel(self.topology, w, self.head, self.activation)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unpack(self.topology, self.w)


@dataclass(frozen=True)
class MiniBatch:
    indices: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        X = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        y = np.asarray(self.targets, dtype=np.float64).ravel()
        if idx.ndim != 1 or idx.size < 1:
            raise ValueError("a mini-batch needs at least one sample")
        if X.shape[0] != y.size or idx.size != y.size:
            raise ValueError(
                f"inconsistent batch: {idx.size} indices, {X.shape[0]} input rows, "
                f"{y.size} targets"
            )
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)

    def __len__(self) -> int:
        return self.targets.size

    @classmethod
    def from_arrays(cls, inputs, targets, indices=None) -> "MiniBatch":
        y = np.asarray(targets, dtype=float).ravel()
        if indices is None:
            indices = np.arange(y.size)
        return cls(indices, inputs, y)


def _check_inputs(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.topology.input_dim:
        raise ValueError(
            f"input has dimension {X.shape[1]}, network expects {model.topology.input_dim}"
        )
    return X


def _forward_trace(model: MlpModel, X: np.ndarray):
    """Return the list of layer inputs (activations) and the pre-squash output."""
    act = _ACTIVATIONS[model.activation][0]
    layers = model.layers()
    hs = [X]
    h = X
    for W, b in layers[:-1]:
        h = act(h @ W + b)
        hs.append(h)
    W, b = layers[-1]
    z = (h @ W + b)[:, 0]
    return hs, z


def predict(model: MlpModel, X: np.ndarray, pre_squash: bool = False) -> np.ndarray:
    """Vectorised forward pass over the rows of ``X``."""
    X = _check_inputs(model, X)
    _, z = _forward_trace(model, X)
    if pre_squash or model.head == "identity":
        return z
    return sigmoid(z)


def forward(model: MlpModel, x) -> tuple[float, float]:
    """Evaluate one input; returns ``(output, pre_squash)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single input vector")
    X = _check_inputs(model, x)
    _, z = _forward_trace(model, X)
    zl = float(z[0])
    out = zl if model.head == "identity" else float(sigmoid(zl))
    return out, zl


def _backprop(model: MlpModel, hs: list[np.ndarray], seed: np.ndarray, per_sample: bool):
    """Back-propagate output sensitivities ``seed`` (one per sample).

    With ``per_sample`` the per-sample gradients are returned as rows of an
    ``L x Q`` matrix; otherwise their sum is returned as a length-Q vector.
    """
    dact = _ACTIVATIONS[model.activation][1]
    layers = model.layers()
    L = seed.size
    delta = seed[:, None]
    blocks: list[np.ndarray] = []
    for k in range(len(layers) - 1, -1, -1):
        h_in = hs[k]
        if per_sample:
            gW = (h_in[:, :, None] * delta[:, None, :]).reshape(L, -1)
            blocks.append(np.concatenate([gW, delta], axis=1))
        else:
            blocks.append(np.concatenate([(h_in.T @ delta).ravel(), delta.sum(axis=0)]))
        if k > 0:
            W = layers[k][0]
            delta = (delta @ W.T) * dact(h_in)
    blocks.reverse()
    return np.concatenate(blocks, axis=1 if per_sample else 0)


def _raise_nonfinite(values: np.ndarray, indices: np.ndarray, what: str):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NonFiniteError(f"non-finite {what} for sample index {int(indices[bad[0]])}")


def _check_trace(hs, z, indices):
    """Raise on the first sample whose activations or output are non-finite."""
    bad = ~np.isfinite(z)
    for h in hs:
        bad |= ~np.isfinite(h).all(axis=1)
    if bad.any():
        raise NonFiniteError(f"non-finite activation for sample index {int(indices[np.flatnonzero(bad)[0]])}")


def weight_jacobian(model: MlpModel, batch: MiniBatch, wrt: str = "full_output") -> np.ndarray:
    """Per-sample gradients of the network output with respect to ``w``.

    Row ``i`` is the gradient of ``f(w; x_i)`` (``wrt="full_output"``) or of the
    pre-squash output (``wrt="pre_squash"``).  One backward sweep over the
    batch; cost per sample is linear in the number of parameters.
    """
    if wrt not in ("full_output", "pre_squash"):
        raise ValueError(f"wrt must be 'full_output' or 'pre_squash', got {wrt!r}")
    X = _check_inputs(model, batch.inputs)
    with np.errstate(invalid="ignore", over="ignore"):
        hs, z = _forward_trace(model, X)
    _check_trace(hs, z, batch.indices)
    seed = np.ones_like(z)
    if wrt == "full_output" and model.head == "sigmoid":
        s = sigmoid(z)
        seed = s * (1.0 - s)
    return _backprop(model, hs, seed, per_sample=True)


def batch_gradient(model: MlpModel, batch: MiniBatch, loss: LossKind) -> np.ndarray:
    """Average gradient ``(1/L) sum_i grad_w l(y_i, f(w; x_i))`` over the batch."""
    X = _check_inputs(model, batch.inputs)
    with np.errstate(invalid="ignore", over="ignore"):
        hs, z = _forward_trace(model, X)
    _check_trace(hs, z, batch.indices)
    seed = loss_derivative_pre(loss, batch.targets, z, model.head)
    _raise_nonfinite(seed, batch.indices, "loss derivative")
    g = _backprop(model, hs, seed, per_sample=False) / len(batch)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient")
    return g


def glorot_init(topology: Topology, rng_seed: int) -> np.ndarray:
    """Glorot/Xavier normalized initialisation; biases start at zero."""
    rng = np.random.default_rng(rng_seed)
    s = topology.layer_sizes
    layers = []
    for n_in, n_out in zip(s[:-1], s[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        layers.append((rng.uniform(-bound, bound, size=(n_in, n_out)), np.zeros(n_out)))
    return pack(layers)
