"""Strongly convex surrogate subproblems built from a linearized network.

The network is linearized around the current weights ``w_n``, the convex loss
is kept intact, and the resulting subproblem is solved exactly (ridge),
by FISTA (l1 / group penalties) or by damped Newton (cross-entropy).

Ridge convention: the quadratic solved is

    w^T (A + (lam + tau) I) w - 2 (b + tau w_n)^T w,

i.e. the l2 penalty enters as ``lam * ||w||^2``.  The loss part
``w^T A w - 2 b^T w`` equals (up to a constant) the mixed sum of linearized
losses plus the ``(1 - rho) d^T w`` history term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .nn_core import MiniBatch, MlpModel, predict, weight_jacobian
from .objective import Manifold, soft_threshold


class SurrogateError(RuntimeError):
    """A surrogate could not be built or solved."""


def linearize_model(model: MlpModel, batch: MiniBatch, wrt: str = "full_output"):
    """Values and weight Jacobian at the current weights.

    Returns ``(f_vals, J)`` such that ``f_vals[i] + J[i] @ (w - model.w)`` is
    the first-order model of sample ``i`` (of the pre-squash output when
    ``wrt="pre_squash"``).
    """
    f = predict(model, batch.inputs, pre_squash=(wrt == "pre_squash"))
    J = weight_jacobian(model, batch, wrt=wrt)
    return f, J


# ---------------------------------------------------------------------------
# Shifted PSD solves ``(H^T H + mu I) x = rhs`` / ``(A + mu I) x = rhs``.


def _lowrank_preferred(H, Q):
    return H is not None and Q > 4 * H.shape[0]


def shifted_solve(mu: float, rhs: np.ndarray, A: np.ndarray | None = None, H: np.ndarray | None = None):
    """Solve ``(A + mu I) x = rhs`` with ``A = H^T H`` when ``H`` is given.

    Uses the Woodbury identity on the ``m x m`` system when ``H`` has few
    rows compared to the dimension, otherwise a dense Cholesky factorization.
    """
    if mu <= 0:
        raise SurrogateError("surrogate not strongly convex (shift must be positive)")
    Q = rhs.shape[0]
    try:
        if _lowrank_preferred(H, Q):
            K = H @ H.T
            K[np.diag_indices_from(K)] += mu
            cf = sla.cho_factor(K, lower=True, check_finite=False)
            x = (rhs - H.T @ sla.cho_solve(cf, H @ rhs, check_finite=False)) / mu
            # one step of iterative refinement
            res = rhs - (H.T @ (H @ x) + mu * x)
            x += (res - H.T @ sla.cho_solve(cf, H @ res, check_finite=False)) / mu
            return x
        M = (H.T @ H) if A is None else np.array(A, dtype=float)
        M[np.diag_indices_from(M)] += mu
        cf = sla.cho_factor(M, lower=True, check_finite=False)
        return sla.cho_solve(cf, rhs, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SurrogateError(f"Cholesky factorization failed: {exc}") from exc


# ---------------------------------------------------------------------------
# Ridge surrogate (squared loss).


@dataclass
class RidgeSurrogate:
    """Quadratic surrogate; ``A = factor.T @ factor`` when ``factor`` is set."""

    b: np.ndarray
    lam: float
    tau: float
    w_n: np.ndarray
    factor: np.ndarray | None = field(default=None, repr=False)
    dense: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.factor is None and self.dense is None:
            raise ValueError("need either the low-rank factor or the dense matrix")
        if self.lam + self.tau <= 0:
            raise SurrogateError("surrogate not strongly convex: lambda and tau are both zero")

    @property
    def n_params(self) -> int:
        return self.b.size

    @cached_property
    def A(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        return self.factor.T @ self.factor

    def matvec(self, v):
        if self.dense is not None:
            return self.dense @ v
        return self.factor.T @ (self.factor @ v)

    def objective(self, w):
        w = np.asarray(w, dtype=float)
        mu = self.lam + self.tau
        return float(w @ self.matvec(w) + mu * (w @ w) - 2.0 * (self.b + self.tau * self.w_n) @ w)

    def loss_gradient(self, w):
        """Gradient of the loss-plus-history part ``w^T A w - 2 b^T w``."""
        return 2.0 * (self.matvec(w) - self.b)

    def gradient(self, w):
        return 2.0 * (self.matvec(w) + (self.lam + self.tau) * w - self.b - self.tau * self.w_n)

    def with_quadratic(self, H_extra: np.ndarray, lin_extra: np.ndarray, weight: float = 1.0) -> "RidgeSurrogate":
        """Add ``weight * (w^T H^T H w - 2 lin^T w)`` (e.g. linearized manifold terms)."""
        s = np.sqrt(weight)
        if self.factor is not None:
            factor = np.vstack([self.factor, s * H_extra])
            dense = None
        else:
            factor = None
            dense = self.dense + weight * (H_extra.T @ H_extra)
        return RidgeSurrogate(self.b + weight * lin_extra, self.lam, self.tau, self.w_n, factor, dense)


def build_ridge(J, f_vals, targets, d_n, rho, lam, tau, w_n) -> RidgeSurrogate:
    """Ridge surrogate from a linearized mini-batch.

    ``A = (rho/L) sum_i J_i J_i^T``, ``b = (rho/L) sum_i J_i r_i - (1-rho)/2 d_n``
    with residuals ``r_i = y_i - f_i + J_i^T w_n``.  ``A`` is kept in factored
    form ``sqrt(rho/L) J``.
    """
    J = np.atleast_2d(np.asarray(J, dtype=float))
    f_vals = np.asarray(f_vals, dtype=float)
    y = np.asarray(targets, dtype=float)
    w_n = np.asarray(w_n, dtype=float)
    d_n = np.asarray(d_n, dtype=float)
    L, Q = J.shape
    if f_vals.shape != (L,) or y.shape != (L,) or w_n.shape != (Q,) or d_n.shape != (Q,):
        raise ValueError("inconsistent surrogate dimensions")
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    if lam < 0 or tau < 0:
        raise ValueError("lambda and tau must be nonnegative")
    if lam == 0 and tau == 0:
        raise SurrogateError("surrogate not strongly convex: lambda and tau are both zero")
    r = residuals(J, f_vals, y, w_n)
    b = (rho / L) * (J.T @ r) - 0.5 * (1.0 - rho) * d_n
    return RidgeSurrogate(b, float(lam), float(tau), w_n, factor=np.sqrt(rho / L) * J)


def residuals(J, f_vals, targets, w_n):
    """``r_i = y_i - f(w_n; x_i) + J_i^T w_n``."""
    return np.asarray(targets, float) - np.asarray(f_vals, float) + J @ w_n


def solve_ridge(s: RidgeSurrogate) -> np.ndarray:
    """Closed form ``(A + (lam+tau) I)^{-1} (b + tau w_n)``."""
    rhs = s.b + s.tau * s.w_n
    mu = s.lam + s.tau
    if s.dense is not None:
        return shifted_solve(mu, rhs, A=s.dense)
    return shifted_solve(mu, rhs, H=s.factor)


# ---------------------------------------------------------------------------
# l1 / group-sparse quadratic via FISTA.


def power_iteration(A: np.ndarray, iters: int = 500, tol: float = 1e-10) -> float:
    """Largest eigenvalue of a symmetric PSD matrix.

    Raises when the iteration exposes negative curvature.
    """
    A = np.asarray(A, dtype=float)
    Q = A.shape[0]
    diag = np.diag(A)
    scale = max(np.abs(A).max(), 1e-300)
    if np.any(diag < -1e-12 * scale):
        raise SurrogateError("matrix is not positive semidefinite (negative diagonal entry)")
    v = np.random.default_rng(12345).standard_normal(Q)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        Av = A @ v
        rq = float(v @ Av)
        if rq < -1e-10 * scale:
            raise SurrogateError("matrix is not positive semidefinite (negative curvature found)")
        nrm = np.linalg.norm(Av)
        if nrm == 0.0:
            return 0.0
        v = Av / nrm
        if abs(nrm - est) <= tol * nrm:
            est = nrm
            break
        est = nrm
    return float(est)


def _fista(grad, prox, x0, step, tol, max_iter):
    """FISTA with gradient-based adaptive restart.  ``prox(v, t)`` is the
    proximal map of ``t`` times the non-smooth term."""
    x = np.array(x0, dtype=float)
    y = x.copy()
    t = 1.0
    for _ in range(max_iter):
        x_new = prox(y - step * grad(y), step)
        if np.max(np.abs(x_new - x), initial=0.0) < tol:
            x = x_new
            break
        if (y - x_new) @ (x_new - x) > 0:  # restart momentum
            t = 1.0
            y = x_new.copy()
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        x = x_new
    return x


def solve_l1_fista(
    A,
    b,
    w_n,
    lam: float,
    tau: float = 0.0,
    groups=None,
    group_weights=None,
    x0=None,
    tol: float = 1e-10,
    max_iter: int = 5000,
) -> np.ndarray:
    """Minimize ``w^T (A + tau I) w - 2 (b + tau w_n)^T w + lam * R(w)``.

    ``R`` is the l1 norm, or ``sum_p a_p ||w_p||`` when ``groups`` is given
    (``a_p`` defaults to the square root of the group size).  Zeros in the
    result are exact.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    w_n = np.asarray(w_n, dtype=float)
    P_max = power_iteration(A) + tau
    lip = 2.0 * P_max * 1.05
    c = b + tau * w_n
    if groups is None:
        prox = lambda v, t: soft_threshold(v, t * lam)
    else:
        from .objective import GroupSparse

        gs = GroupSparse(lam, tuple(groups), None if group_weights is None else tuple(group_weights))
        prox = lambda v, t: gs.prox(v, t * lam)
    if lip == 0.0:
        # no curvature: bounded only if the penalty dominates the linear term
        if np.any(prox(2.0 * c, 1.0) != 0.0):
            raise SurrogateError("l1 subproblem is unbounded below (no curvature)")
        return np.zeros_like(c)
    grad = lambda w: 2.0 * (A @ w + tau * w - c)
    start = w_n if x0 is None else x0
    return _fista(grad, prox, start, 1.0 / lip, tol, max_iter)


def l1_objective(A, b, w_n, lam, tau, w, groups=None, group_weights=None):
    """Objective value minimized by :func:`solve_l1_fista`."""
    w = np.asarray(w, dtype=float)
    smooth = w @ (A @ w) + tau * (w @ w) - 2.0 * (b + tau * w_n) @ w
    if groups is None:
        return float(smooth + lam * np.abs(w).sum())
    from .objective import GroupSparse

    gs = GroupSparse(lam, tuple(groups), None if group_weights is None else tuple(group_weights))
    return float(smooth + lam * gs.value(w))


# ---------------------------------------------------------------------------
# Cross-entropy (logistic) surrogate.


def _log1pexp(z):
    return np.logaddexp(0.0, z)


@dataclass
class LogisticSurrogate:
    """Minimized objective::

        (rho/L) sum_i ce(y_i, sigmoid(z0_i + JL_i^T (w - w_n)))
        + lam * r(w) + (1 - rho) d^T (w - w_n) + tau ||w - w_n||^2
        [+ extra_weight * ||extra_t - extra_H w||^2]

    with ``r = 0.5 ||w||^2`` (``reg_variant="l2"``) or ``||w||_1`` ("l1").
    """

    z0: np.ndarray
    JL: np.ndarray
    targets: np.ndarray
    rho: float
    lam: float
    tau: float
    d_n: np.ndarray
    w_n: np.ndarray
    reg_variant: str = "l2"
    extra_H: np.ndarray | None = field(default=None, repr=False)
    extra_t: np.ndarray | None = field(default=None, repr=False)
    extra_weight: float = 0.0

    def __post_init__(self):
        self.JL = np.atleast_2d(np.asarray(self.JL, dtype=float))
        self.z0 = np.asarray(self.z0, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        self.d_n = np.asarray(self.d_n, dtype=float)
        self.w_n = np.asarray(self.w_n, dtype=float)
        if self.reg_variant not in ("l2", "l1"):
            raise ValueError(f"reg_variant must be 'l2' or 'l1', got {self.reg_variant!r}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        L, Q = self.JL.shape
        if self.z0.shape != (L,) or self.targets.shape != (L,) or self.w_n.shape != (Q,) or self.d_n.shape != (Q,):
            raise ValueError("inconsistent surrogate dimensions")
        for name in ("z0", "JL", "d_n", "w_n"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def ridge(self) -> float:
        """Coefficient of ``0.5 ||w||^2`` collected from penalty and proximal term."""
        return (self.lam if self.reg_variant == "l2" else 0.0) + 2.0 * self.tau

    def _z(self, w):
        return self.z0 + self.JL @ (w - self.w_n)

    def smooth_value(self, w):
        w = np.asarray(w, dtype=float)
        z = self._z(w)
        L = z.size
        val = (self.rho / L) * float(np.sum(_log1pexp(z) - self.targets * z))
        val += (1.0 - self.rho) * float(self.d_n @ (w - self.w_n))
        val += self.tau * float((w - self.w_n) @ (w - self.w_n))
        if self.reg_variant == "l2":
            val += 0.5 * self.lam * float(w @ w)
        if self.extra_H is not None:
            e = self.extra_t - self.extra_H @ w
            val += self.extra_weight * float(e @ e)
        return val

    def objective(self, w):
        val = self.smooth_value(w)
        if self.reg_variant == "l1":
            val += self.lam * float(np.abs(w).sum())
        return val

    def loss_gradient(self, w):
        """Gradient of the linearized-loss-plus-history part."""
        z = self._z(w)
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (self.rho / z.size) * (self.JL.T @ (p - self.targets)) + (1.0 - self.rho) * self.d_n

    def smooth_gradient(self, w):
        w = np.asarray(w, dtype=float)
        g = self.loss_gradient(w) + 2.0 * self.tau * (w - self.w_n)
        if self.reg_variant == "l2":
            g = g + self.lam * w
        if self.extra_H is not None:
            g = g - 2.0 * self.extra_weight * (self.extra_H.T @ (self.extra_t - self.extra_H @ w))
        return g

    def _curvature_rows(self, w):
        z = self._z(w)
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        D = (self.rho / z.size) * p * (1.0 - p)
        rows = np.sqrt(D)[:, None] * self.JL
        if self.extra_H is not None:
            rows = np.vstack([rows, np.sqrt(2.0 * self.extra_weight) * self.extra_H])
        return rows


def solve_logistic(s: LogisticSurrogate, tol: float = 1e-8, max_iter: int = 200, max_halvings: int = 50) -> np.ndarray:
    """Minimize a logistic surrogate.

    l2: damped Newton with Armijo backtracking, Hessian
    ``JL^T D JL + (lam + 2 tau) I`` inverted through the low-rank structure.
    l1: FISTA with restart; stops on the proximal-gradient mapping norm.
    """
    if s.ridge <= 0 and s.extra_H is None:
        raise SurrogateError("surrogate not strongly convex: lambda (l2) and tau are both zero")
    if s.reg_variant == "l1":
        return _solve_logistic_l1(s, tol)
    w = s.w_n.copy()
    f = s.objective(w)
    for _ in range(max_iter):
        g = s.smooth_gradient(w)
        gnorm = np.linalg.norm(g)
        if gnorm <= tol:
            return w
        rows = s._curvature_rows(w)
        p = -shifted_solve(s.ridge, g, H=rows) if s.ridge > 0 else -np.linalg.solve(rows.T @ rows, g)
        slope = float(g @ p)
        step = 1.0
        for _ in range(max_halvings):
            w_try = w + step * p
            f_try = s.objective(w_try)
            if f_try <= f + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            # at the floating-point floor the full Newton step is already exact
            if gnorm <= 1e3 * tol:
                return w
            raise SurrogateError("line search failed after 50 halvings")
        w, f = w_try, f_try
    g = s.smooth_gradient(w)
    if np.linalg.norm(g) > tol:
        raise SurrogateError(f"Newton did not converge (gradient norm {np.linalg.norm(g):.3e})")
    return w


def _solve_logistic_l1(s: LogisticSurrogate, tol: float, max_iter: int = 50000) -> np.ndarray:
    lip = 0.25 * (s.rho / s.z0.size) * np.linalg.norm(s.JL, 2) ** 2 + 2.0 * s.tau
    if s.extra_H is not None:
        lip += 2.0 * s.extra_weight * np.linalg.norm(s.extra_H, 2) ** 2
    lip *= 1.05
    step = 1.0 / lip
    prox = lambda v, t: soft_threshold(v, t * s.lam)
    x = s.w_n.copy()
    y = x.copy()
    t = 1.0
    for _ in range(max_iter):
        x_new = prox(y - step * s.smooth_gradient(y), step)
        mapping = (y - x_new) / step
        if np.linalg.norm(mapping) <= tol:
            return x_new
        if (y - x_new) @ (x_new - x) > 0:
            t, y = 1.0, x_new.copy()
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        x = x_new
    return x


def prox_gradient_norm(s: LogisticSurrogate, w) -> float:
    """Optimality measure: gradient norm (l2) or unit-step proximal-gradient
    mapping norm (l1)."""
    g = s.smooth_gradient(w)
    if s.reg_variant == "l2":
        return float(np.linalg.norm(g))
    return float(np.linalg.norm(w - soft_threshold(w - g, s.lam)))


# ---------------------------------------------------------------------------
# Linearized manifold regularizer.


def manifold_factor(model: MlpModel, batch: MiniBatch, manifold: Manifold, w_n=None):
    """Factored linearized manifold term ``||t - H w||^2``.

    One row per (anchor i in batch, neighbour j) with scale
    ``sqrt(q_ij / k)``, ``H`` rows ``J_i - J_j`` and ``t`` entries
    ``(J_i - J_j)^T w_n - (f_i - f_j)``, so that ``t - H w`` is minus the
    linearized output difference.  The anchors are the batch
    samples, whose ``indices`` address ``manifold.inputs``.
    """
    g = manifold.graph
    if w_n is not None:
        model = model.with_weights(w_n)
    rows = np.asarray(batch.indices, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= g.n_nodes):
        raise SurrogateError("missing neighbour data: batch index outside the graph")
    nb = g.neighbors[rows]
    involved, inv = np.unique(np.concatenate([rows, nb.ravel()]), return_inverse=True)
    ri = inv[: rows.size]
    rj = inv[rows.size:].reshape(nb.shape)
    Xs = manifold.inputs[involved]
    sub = MiniBatch.from_arrays(Xs, np.zeros(len(involved)), involved)
    f, J = linearize_model(model, sub)
    scale = np.sqrt(g.weights[rows] / g.k).ravel()
    Jd = (J[ri][:, None, :] - J[rj]).reshape(-1, J.shape[1])
    fd = (f[ri][:, None] - f[rj]).ravel()
    H = scale[:, None] * Jd
    t = scale * (Jd @ model.w - fd)
    return H, t


def manifold_terms(model: MlpModel, batch: MiniBatch, manifold: Manifold, w_n=None):
    """Quadratic and linear coefficients ``(Q_mat, q_vec)`` of the linearized
    manifold term ``w^T Q_mat w - 2 q_vec^T w + const``."""
    H, t = manifold_factor(model, batch, manifold, w_n)
    return H.T @ H, H.T @ t


def manifold_surrogate_value(H, t, w) -> float:
    e = t - H @ np.asarray(w, dtype=float)
    return float(e @ e)


# ---------------------------------------------------------------------------
# Quadratic surrogate with a non-smooth penalty (l1, elastic net, group).


@dataclass
class SparseSurrogate:
    """``quad.objective(w) + penalty.lam * penalty.nonsmooth_value(w)``.

    The ridge share of an elastic net lives in ``quad.lam``.
    """

    quad: RidgeSurrogate
    penalty: object

    @property
    def w_n(self):
        return self.quad.w_n

    def objective(self, w):
        return self.quad.objective(w) + self.penalty.lam * self.penalty.nonsmooth_value(w)

    def loss_gradient(self, w):
        return self.quad.loss_gradient(w)


def solve_sparse(s: SparseSurrogate, tol: float = 1e-10, max_iter: int = 5000) -> np.ndarray:
    q = s.quad
    mu = q.lam + q.tau
    top = power_iteration(q.dense) if q.dense is not None else np.linalg.norm(q.factor, 2) ** 2
    lip = 2.0 * 1.05 * (top + mu)
    c = q.b + q.tau * q.w_n
    lam = s.penalty.lam
    prox = lambda v, t: s.penalty.prox(v, t * lam)
    grad = lambda w: 2.0 * (q.matvec(w) + mu * w - c)
    if lip == 0.0:
        raise SurrogateError("surrogate not strongly convex: no curvature in the quadratic")
    return _fista(grad, prox, q.w_n, 1.0 / lip, tol, max_iter)


def solve(s) -> np.ndarray:
    """Solve any surrogate produced by this module."""
    if isinstance(s, RidgeSurrogate):
        return solve_ridge(s)
    if isinstance(s, SparseSurrogate):
        return solve_sparse(s)
    if isinstance(s, LogisticSurrogate):
        return solve_logistic(s)
    raise TypeError(f"unknown surrogate type {type(s).__name__}")
