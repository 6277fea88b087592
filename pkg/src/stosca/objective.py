"""Losses, regularizers and the regularized training objective

    U(w) = (1/N) sum_i l(y_i, f(w; x_i)) + lambda * r(w).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .nn_core import MlpModel


class LossKind(enum.Enum):
    SQUARED = "squared"
    CROSS_ENTROPY = "cross_entropy"

    @classmethod
    def parse(cls, value) -> "LossKind":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())

    @property
    def head(self) -> str:
        """Output head this loss must be paired with."""
        return "identity" if self is LossKind.SQUARED else "sigmoid"


def loss_value(loss: LossKind, y: float, f: float) -> float:
    """Loss of a single prediction ``f`` against target ``y``."""
    if loss is LossKind.SQUARED:
        return (y - f) ** 2
    if not 0.0 < f < 1.0:
        raise ValueError(f"cross-entropy needs a prediction in (0, 1), got {f}")
    if y not in (0.0, 1.0):
        raise ValueError(f"cross-entropy needs a binary target, got {y}")
    return -(y * np.log(f) + (1.0 - y) * np.log1p(-f))


def loss_values_pre(loss: LossKind, y: np.ndarray, z: np.ndarray, head: str) -> np.ndarray:
    """Vectorised losses from pre-squash outputs ``z`` (numerically stable
    for the sigmoid/cross-entropy pair)."""
    _check_pairing(loss, head)
    if loss is LossKind.SQUARED:
        return (y - z) ** 2
    return np.logaddexp(0.0, z) - y * z


def loss_derivative_pre(loss: LossKind, y: np.ndarray, z: np.ndarray, head: str) -> np.ndarray:
    """d l / d z where ``z`` is the pre-squash network output."""
    _check_pairing(loss, head)
    if loss is LossKind.SQUARED:
        return 2.0 * (z - y)
    return 0.5 * (1.0 + np.tanh(0.5 * z)) - y


def _check_pairing(loss: LossKind, head: str):
    if loss.head != head:
        raise ValueError(f"{loss.value} loss requires the {loss.head!r} output head, got {head!r}")


def soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    out = np.sign(v) * np.maximum(np.abs(v) - t, 0.0)
    out[out == 0.0] = 0.0  # drop negative zeros
    return out


# ---------------------------------------------------------------------------
# Regularizers.  ``value`` returns r(w) without the lambda factor.  Each convex
# variant splits into a ridge part ``ridge_weight * 0.5 * ||w||^2`` and a
# non-smooth part handled through ``prox``.


@dataclass(frozen=True)
class L2:
    lam: float

    ridge_weight = 1.0

    def value(self, w):
        return 0.5 * float(np.dot(w, w))

    def gradient(self, w):
        return np.asarray(w, dtype=float).copy()

    def nonsmooth_value(self, w):
        return 0.0

    def prox(self, v, t):
        return np.array(v, dtype=float)

    def restrict(self, block):
        return self


@dataclass(frozen=True)
class L1:
    lam: float

    ridge_weight = 0.0

    def value(self, w):
        return float(np.abs(w).sum())

    def gradient(self, w):
        """Subgradient ``sign(w)`` (zero at zero)."""
        return np.sign(w).astype(float)

    def nonsmooth_value(self, w):
        return self.value(w)

    def prox(self, v, t):
        return soft_threshold(np.asarray(v, dtype=float), t)

    def restrict(self, block):
        return self


@dataclass(frozen=True)
class ElasticNet:
    """``mix * ||w||_1 + (1 - mix) * 0.5 * ||w||^2``."""

    lam: float
    mix: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError(f"elastic-net mix must lie in [0, 1], got {self.mix}")

    @property
    def ridge_weight(self):
        return 1.0 - self.mix

    def value(self, w):
        return self.mix * float(np.abs(w).sum()) + (1.0 - self.mix) * 0.5 * float(np.dot(w, w))

    def gradient(self, w):
        return self.mix * np.sign(w) + (1.0 - self.mix) * np.asarray(w, dtype=float)

    def nonsmooth_value(self, w):
        return self.mix * float(np.abs(w).sum())

    def prox(self, v, t):
        return soft_threshold(np.asarray(v, dtype=float), t * self.mix)

    def restrict(self, block):
        return self


@dataclass(frozen=True)
class GroupSparse:
    """``sum_p a_p ||w_p||`` over a partition of the indices into groups.

    ``weights`` default to the square root of each group's size.
    """

    lam: float
    groups: tuple
    weights: tuple = None
    n_params: int = None

    ridge_weight = 0.0

    def __post_init__(self):
        groups = tuple(np.asarray(g, dtype=np.int64) for g in self.groups)
        if any(g.size == 0 for g in groups):
            raise ValueError("groups must be non-empty")
        flat = np.concatenate(groups)
        if flat.size and flat.min() < 0:
            raise ValueError("group index out of range (negative)")
        if self.n_params is not None:
            if flat.size and flat.max() >= self.n_params:
                raise ValueError(
                    f"group index {int(flat.max())} out of range for {self.n_params} parameters"
                )
            if flat.size != self.n_params or np.unique(flat).size != self.n_params:
                raise ValueError("groups must partition the parameter indices")
        elif np.unique(flat).size != flat.size:
            raise ValueError("groups must be disjoint")
        weights = self.weights
        if weights is None:
            weights = tuple(float(np.sqrt(g.size)) for g in groups)
        if len(weights) != len(groups) or any(a <= 0 for a in weights):
            raise ValueError("need one positive weight per group")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "weights", tuple(float(a) for a in weights))

    def _check(self, w):
        top = max(int(g.max()) for g in self.groups)
        if top >= len(w):
            raise ValueError(f"group index {top} out of range for vector of length {len(w)}")

    def value(self, w):
        w = np.asarray(w, dtype=float)
        self._check(w)
        return float(sum(a * np.linalg.norm(w[g]) for g, a in zip(self.groups, self.weights)))

    def gradient(self, w):
        w = np.asarray(w, dtype=float)
        self._check(w)
        out = np.zeros_like(w)
        for g, a in zip(self.groups, self.weights):
            nrm = np.linalg.norm(w[g])
            if nrm > 0:
                out[g] = a * w[g] / nrm
        return out

    def nonsmooth_value(self, w):
        return self.value(w)

    def prox(self, v, t):
        v = np.asarray(v, dtype=float)
        out = v.copy()
        for g, a in zip(self.groups, self.weights):
            nrm = np.linalg.norm(v[g])
            thr = t * a
            if nrm <= thr:
                out[g] = 0.0
            else:
                out[g] = (1.0 - thr / nrm) * v[g]
        return out

    def restrict(self, block):
        """Regularizer on the sub-vector ``w[block]``; every group must lie
        entirely inside or outside the block."""
        block = np.asarray(block, dtype=np.int64)
        pos = {int(j): i for i, j in enumerate(block)}
        groups, weights = [], []
        for g, a in zip(self.groups, self.weights):
            inside = [int(j) in pos for j in g]
            if all(inside):
                groups.append([pos[int(j)] for j in g])
                weights.append(a)
            elif any(inside):
                raise ValueError("a group straddles a block boundary")
        return GroupSparse(self.lam, tuple(groups), tuple(weights), n_params=block.size)


# ---------------------------------------------------------------------------
# Manifold regularization (non-convex in w).


@dataclass(frozen=True)
class NeighborGraph:
    """k-nearest-neighbour graph: ``neighbors[i]`` holds the k neighbour
    indices of sample i and ``weights[i]`` the matching ``q_ij``."""

    neighbors: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nb = np.asarray(self.neighbors, dtype=np.int64)
        q = np.asarray(self.weights, dtype=float)
        if nb.shape != q.shape or nb.ndim != 2:
            raise ValueError("neighbors and weights must be N x k arrays of equal shape")
        if np.any(q < 0):
            raise ValueError("graph weights must be nonnegative")
        object.__setattr__(self, "neighbors", nb)
        object.__setattr__(self, "weights", q)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.neighbors.shape[0]


def median_pairwise_distance(inputs, max_samples: int = 1000, seed: int = 0) -> float:
    from scipy.spatial.distance import pdist

    X = np.asarray(inputs, dtype=float)
    if X.shape[0] > max_samples:
        X = X[np.random.default_rng(seed).choice(X.shape[0], max_samples, replace=False)]
    d = pdist(X)
    return float(np.median(d)) if d.size else 1.0


def build_knn_graph(inputs, k: int, sigma: float | None = None) -> NeighborGraph:
    """Gaussian-weighted kNN graph, symmetrised by ``max(q_ij, q_ji)``.

    Exact Euclidean distances, brute force; ties go to the lower index.
    ``sigma`` defaults to the median pairwise distance of a subsample.
    """
    X = np.asarray(inputs, dtype=float)
    N = X.shape[0]
    if not 0 < k < N:
        raise ValueError(f"need 0 < k < N, got k={k}, N={N}")
    if sigma is None:
        sigma = median_pairwise_distance(X) or 1.0
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    neighbors = np.empty((N, k), dtype=np.int64)
    sqdist = np.empty((N, k))
    rows = max(1, int(2e7 // max(1, N * X.shape[1])))
    for start in range(0, N, rows):
        stop = min(N, start + rows)
        diff = X[start:stop, None, :] - X[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        neighbors[start:stop] = order
        sqdist[start:stop] = np.take_along_axis(d2, order, axis=1)
    q = np.exp(-sqdist / (2.0 * sigma**2))
    # symmetrise on the stored pairs: q_ij <- max(q_ij, q_ji)
    directed = {}
    for i in range(N):
        for m in range(k):
            directed[(i, int(neighbors[i, m]))] = q[i, m]
    for i in range(N):
        for m in range(k):
            j = int(neighbors[i, m])
            q[i, m] = max(q[i, m], directed.get((j, i), 0.0))
    return NeighborGraph(neighbors, q)


@dataclass(frozen=True)
class Manifold:
    """``sum_i (1/k) sum_{j in N_i} q_ij (f(w; x_i) - f(w; x_j))^2`` over the
    graph built on ``inputs``."""

    lam: float
    graph: NeighborGraph
    inputs: np.ndarray = field(repr=False)

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        if X.shape[0] != self.graph.n_nodes:
            raise ValueError("graph and inputs disagree on the number of samples")
        object.__setattr__(self, "inputs", X)

    def value(self, w, model: "MlpModel") -> float:
        from .nn_core import predict

        f = predict(model.with_weights(w), self.inputs)
        diff = f[:, None] - f[self.graph.neighbors]
        return float((self.graph.weights * diff**2).sum() / self.graph.k)

    def gradient(self, w, model: "MlpModel", rows=None) -> np.ndarray:
        """Gradient of the sum restricted to the anchor samples ``rows``
        (all samples by default)."""
        from .nn_core import MiniBatch, predict, weight_jacobian

        m = model.with_weights(w)
        g = self.graph
        rows = np.arange(g.n_nodes) if rows is None else np.asarray(rows, dtype=np.int64)
        nb = g.neighbors[rows]
        involved = np.unique(np.concatenate([rows, nb.ravel()]))
        pos = np.searchsorted(involved, involved)
        lookup = dict(zip(involved.tolist(), pos.tolist()))
        Xs = self.inputs[involved]
        f = predict(m, Xs)
        J = weight_jacobian(m, MiniBatch.from_arrays(Xs, np.zeros(len(involved))))
        ri = np.array([lookup[i] for i in rows.tolist()])
        rj = np.vectorize(lookup.get)(nb)
        coef = 2.0 * g.weights[rows] * (f[ri][:, None] - f[rj]) / g.k
        out = coef.sum(axis=1) @ J[ri]
        out -= np.bincount(rj.ravel(), weights=coef.ravel(), minlength=len(involved)) @ J
        return out


def regularizer_value(reg, w, model: "MlpModel | None" = None) -> float:
    """r(w) for any regularizer; the manifold variant needs ``model`` to
    evaluate the network."""
    w = np.asarray(w, dtype=float)
    if isinstance(reg, Manifold):
        if model is None:
            raise ValueError("the manifold regularizer needs the model")
        return reg.value(w, model)
    return reg.value(w)


def objective_value(model: "MlpModel", inputs, targets, loss: LossKind, reg=None, manifold=None) -> float:
    """U(w) = mean loss + lambda r(w) (+ manifold term if given)."""
    from .nn_core import predict

    loss = LossKind.parse(loss)
    y = np.asarray(targets, dtype=float)
    z = predict(model, inputs, pre_squash=True)
    if loss is LossKind.CROSS_ENTROPY and not np.all((y == 0) | (y == 1)):
        raise ValueError("cross-entropy targets must be 0 or 1")
    total = float(np.mean(loss_values_pre(loss, y, z, model.head)))
    for term in (reg, manifold):
        if term is not None:
            total += term.lam * regularizer_value(term, model.w, model)
    return total
