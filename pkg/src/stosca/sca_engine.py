"""Stochastic SCA training loop.

Each iteration draws a mini-batch, solves the strongly convex surrogate
around ``w_n``, moves ``w`` by a convex combination towards the surrogate
optimum and refreshes the gradient average ``d``::

    w_{n+1} = (1 - alpha_n) w_n + alpha_n w_hat
    d_{n+1} = (1 - rho_n) d_n + rho_n * (1/L) sum_i grad l_i(w_n)
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .block_parallel import BlockPartition, make_partition, parallel_surrogate_step
from .metrics import compute_mse, compute_roc_auc
from .nn_core import MiniBatch, MlpModel, NonFiniteError, batch_gradient, predict, sigmoid
from .objective import L1, L2, ElasticNet, GroupSparse, LossKind, Manifold, objective_value
from .records import RunRecord
from .surrogate import (
    LogisticSurrogate,
    SparseSurrogate,
    SurrogateError,
    build_ridge,
    linearize_model,
    manifold_factor,
    solve,
)

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, record: RunRecord):
        super().__init__(message)
        self.record = record


# ---------------------------------------------------------------------------
# Step-size / mixing schedules.


def step_size_next(current: float, eps: float) -> float:
    """Quadratically decreasing rule ``a (1 - eps a)``."""
    if current <= 0:
        raise ValueError("step size must be positive")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps > 0 and current >= 1.0 / eps:
        raise ValueError(f"step size {current} >= 1/eps = {1.0 / eps}; the sequence would turn nonpositive")
    return current * (1.0 - eps * current)


@dataclass(frozen=True)
class QuadraticDecay:
    x0: float
    eps: float

    def next(self, current: float, n: int) -> float:
        return step_size_next(current, self.eps)


@dataclass(frozen=True)
class PowerDecay:
    """``x0 * (1 + n / shift) ** (-power)``."""

    x0: float
    power: float
    shift: float = 1.0

    def next(self, current: float, n: int) -> float:
        return self.x0 * (1.0 + (n + 1) / self.shift) ** (-self.power)


@dataclass(frozen=True)
class Constant:
    x0: float

    def next(self, current: float, n: int) -> float:
        return current


def _sequence(rule, count: int) -> np.ndarray:
    out = np.empty(count)
    x = rule.x0
    for n in range(count):
        out[n] = x
        x = rule.next(x, n)
    return out


@dataclass(frozen=True)
class Schedule:
    alpha: object = QuadraticDecay(0.5, 0.01)
    rho: object = QuadraticDecay(0.9, 0.01)

    def __post_init__(self):
        if not 0.0 <= self.alpha.x0 <= 1.0:
            raise ValueError("alpha0 must lie in [0, 1]")
        if not 0.0 < self.rho.x0 <= 1.0:
            raise ValueError("rho0 must lie in (0, 1]")

    @classmethod
    def quadratic(cls, alpha0=0.5, eps_alpha=0.01, rho0=0.9, eps_rho=0.01) -> "Schedule":
        return cls(QuadraticDecay(alpha0, eps_alpha), QuadraticDecay(rho0, eps_rho))

    def sequences(self, count: int):
        return _sequence(self.alpha, count), _sequence(self.rho, count)


@dataclass
class ScheduleReport:
    horizon: int
    checks: dict
    exponents: dict
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def _tail_exponent(x: np.ndarray) -> float:
    """Decay exponent p of ``x_n ~ n^-p`` over the last decade."""
    H = x.size
    a, b = x[H // 10 - 1], x[H - 1]
    if a <= 0 or b <= 0:
        return math.inf
    return -math.log(b / a) / math.log(H / (H // 10))


def verify_schedule(schedule: Schedule, horizon: int = 100_000, tol: float = 0.05) -> ScheduleReport:
    """Numerically audit the convergence conditions on (alpha_n, rho_n).

    Each sequence must be positive and nonincreasing, vanish, have a
    divergent sum and a summable square; ``alpha_n / rho_n`` must vanish.
    Asymptotics are judged from the power-law decay exponent over the last
    decade of the horizon (sum diverges iff p <= 1, squares summable iff
    p > 1/2), with margin ``tol``.
    """
    if horizon < 1000:
        raise ValueError("horizon must be at least 1000")
    alpha, rho = schedule.sequences(horizon)
    checks, exps = {}, {}
    for name, x in (("alpha", alpha), ("rho", rho)):
        p = _tail_exponent(x)
        exps[name] = p
        half = x[horizon // 2 :]
        checks[f"{name}_positive"] = bool(np.all(x > 0))
        checks[f"{name}_nonincreasing"] = bool(np.all(np.diff(x) <= 0))
        checks[f"{name}_to_zero"] = bool(p > tol)
        checks[f"{name}_sum_diverges"] = bool(p <= 1.0 + tol and half.sum() > 0)
        checks[f"{name}_square_summable"] = bool(p > 0.5 + tol)
    ratio = alpha / rho
    exps["ratio"] = _tail_exponent(ratio) if np.all(ratio > 0) else math.inf
    checks["ratio_to_zero"] = bool(exps["ratio"] > tol and np.all(np.diff(ratio[horizon // 10 :]) <= 1e-15))
    violations = [k for k, v in checks.items() if not v]
    return ScheduleReport(horizon, checks, exps, violations)


# ---------------------------------------------------------------------------
# Engine state and configuration.


@dataclass
class ScaState:
    w: np.ndarray
    d: np.ndarray
    n: int
    alpha: float
    rho: float
    tau: float = 0.0

    def __post_init__(self):
        for name in ("w", "d"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteError(f"non-finite entries in state.{name}")


@dataclass
class ScaConfig:
    batch_size: int = 20
    loss: LossKind = LossKind.SQUARED
    reg: object = field(default_factory=lambda: L2(1e-3))
    schedule: Schedule = field(default_factory=Schedule)
    tau: float = 0.05
    max_iters: int = 500
    rng_seed: int = 0
    partition: BlockPartition | None = None
    blocks: int = 1
    block_policy: str = "static"
    workers: int = 1
    log_every: int = 1
    d0: str = "zero"
    eval_size: int = 2000

    def __post_init__(self):
        self.loss = LossKind.parse(self.loss)
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if self.d0 not in ("zero", "first_batch"):
            raise ValueError("d0 must be 'zero' or 'first_batch'")
        if self.reg is None:
            self.reg = L2(0.0)


def initial_state(w0, config: ScaConfig, d0=None) -> ScaState:
    w0 = np.array(w0, dtype=float)
    d = np.zeros_like(w0) if d0 is None else np.array(d0, dtype=float)
    return ScaState(w0, d, 0, config.schedule.alpha.x0, config.schedule.rho.x0, config.tau)


def _check_finite_rows(values, batch: MiniBatch, what: str):
    bad = ~np.isfinite(values)
    if bad.ndim > 1:
        bad = bad.any(axis=1)
    if bad.any():
        raise NonFiniteError(f"non-finite {what} for sample index {int(batch.indices[np.flatnonzero(bad)[0]])}")


def build_surrogate(model: MlpModel, batch: MiniBatch, d_n, rho: float, config: ScaConfig,
                    manifold: Manifold | None = None, n_train: int | None = None):
    """Surrogate at ``model.w`` for the configured loss and regularizer.

    Returns ``(surrogate, grad)`` where ``grad`` is the mini-batch loss
    gradient at ``model.w``, recovered from the same Jacobian.
    """
    reg, tau = config.reg, config.tau
    L = len(batch)
    y = batch.targets
    w_n = model.w
    mfac = None
    if manifold is not None:
        H, t = manifold_factor(model, batch, manifold)
        scale = (n_train or manifold.graph.n_nodes) / L
        mfac = (H, t, manifold.lam * scale)

    if config.loss is LossKind.SQUARED:
        f, J = linearize_model(model, batch)
        _check_finite_rows(f, batch, "network output")
        _check_finite_rows(J, batch, "Jacobian row")
        grad = (2.0 / L) * (J.T @ (f - y))
        lam_ridge = reg.lam * reg.ridge_weight
        try:
            quad = build_ridge(J, f, y, d_n, rho, lam_ridge, tau, w_n)
        except SurrogateError as exc:
            raise SurrogateError(f"{exc} (a non-ridge penalty needs tau > 0)") from exc
        if mfac is not None:
            H, t, wt = mfac
            quad = quad.with_quadratic(H, H.T @ t, wt)
        if isinstance(reg, L2):
            return quad, grad
        if isinstance(reg, (L1, ElasticNet, GroupSparse)):
            return SparseSurrogate(quad, reg), grad
        raise ValueError(f"unsupported regularizer {type(reg).__name__}")

    z, JL = linearize_model(model, batch, wrt="pre_squash")
    _check_finite_rows(z, batch, "network output")
    _check_finite_rows(JL, batch, "Jacobian row")
    grad = (JL.T @ (sigmoid(z) - y)) / L
    if isinstance(reg, L2):
        variant = "l2"
    elif isinstance(reg, L1):
        variant = "l1"
    else:
        raise ValueError("cross-entropy surrogates support l2 or l1 penalties only")
    extra = {}
    if mfac is not None:
        extra = dict(extra_H=mfac[0], extra_t=mfac[1], extra_weight=mfac[2])
    s = LogisticSurrogate(z, JL, y, rho, reg.lam, tau, d_n, w_n, variant, **extra)
    return s, grad


def sca_iteration(state: ScaState, batch: MiniBatch, model: MlpModel, config: ScaConfig,
                  manifold: Manifold | None = None, partition: BlockPartition | None = None,
                  n_train: int | None = None) -> ScaState:
    """One SCA update; ``model`` supplies the architecture, ``state.w`` the weights."""
    m = model.with_weights(state.w)
    s, grad = build_surrogate(m, batch, state.d, state.rho, config, manifold, n_train)
    try:
        if partition is not None:
            w_hat = parallel_surrogate_step(s, partition, state.w, config.workers, iteration=state.n)
        else:
            w_hat = solve(s)
    except SurrogateError as exc:
        raise SurrogateError(f"iteration {state.n}: {exc}") from exc
    a, r = state.alpha, state.rho
    w_new = (1.0 - a) * state.w + a * w_hat
    d_new = (1.0 - r) * state.d + r * grad
    sched = config.schedule
    return ScaState(
        w_new, d_new, state.n + 1,
        sched.alpha.next(a, state.n) if a > 0 else a,
        sched.rho.next(r, state.n),
        state.tau,
    )


# ---------------------------------------------------------------------------
# Training loops (shared by SCA and the baselines).


def _as_arrays(data):
    if hasattr(data, "inputs"):
        return data.inputs, data.targets
    X, y = data
    return np.asarray(X, dtype=float), np.asarray(y, dtype=float)


def _eval_subset(X, y, size: int, seed: int):
    if X.shape[0] <= size:
        return X, y
    idx = np.sort(np.random.default_rng([seed, 2]).choice(X.shape[0], size, replace=False))
    return X[idx], y[idx]


def evaluate_metrics(model: MlpModel, test) -> dict:
    X, y = _as_arrays(test)
    p = predict(model, X)
    if model.head == "sigmoid":
        return {"auc": compute_roc_auc(p, y)[1]}
    return {"mse": compute_mse(p, y)}


def _run(model, data, config: ScaConfig, name: str, step, manifold=None, test=None):
    from .data import Dataset, MiniBatchStream

    X, y = _as_arrays(data)
    ds = data if isinstance(data, Dataset) else Dataset("train", X, y, "binary" if config.loss is LossKind.CROSS_ENTROPY else "regression")
    stream = MiniBatchStream(ds, config.batch_size, config.rng_seed)
    Xe, ye = _eval_subset(X, y, config.eval_size, config.rng_seed)

    def objective(w):
        return objective_value(model.with_weights(w), Xe, ye, config.loss, config.reg, manifold)

    rec = RunRecord(name, config.rng_seed)
    w = model.w.copy()
    rec.initial_objective = objective(w)
    elapsed = 0.0
    for n in range(config.max_iters):
        batch = next(stream)
        t0 = time.perf_counter()
        try:
            w = step(w, batch, n)
        except (SurrogateError, NonFiniteError, FloatingPointError) as exc:
            rec.status, rec.error = "failed", f"iteration {n}: {exc}"
            raise TrainingDiverged(rec.error, rec) from exc
        elapsed += time.perf_counter() - t0
        if (n + 1) % config.log_every == 0 or n + 1 == config.max_iters:
            obj = objective(w)
            if not math.isfinite(obj):
                rec.status, rec.error = "diverged", f"non-finite objective after iteration {n + 1}"
                raise TrainingDiverged(rec.error, rec)
            rec.add(n + 1, obj, 1e3 * elapsed)
    final = model.with_weights(w)
    if test is not None:
        rec.metrics = evaluate_metrics(final, test)
    return final, rec


def _check_head(model: MlpModel, config: ScaConfig):
    if model.head != config.loss.head:
        raise ValueError(f"{config.loss.value} loss needs the {config.loss.head!r} head, model has {model.head!r}")


def train(model: MlpModel, data, config: ScaConfig, manifold: Manifold | None = None, test=None):
    """Run stochastic SCA for ``config.max_iters`` iterations.

    Returns ``(final_model, RunRecord)``.  Deterministic for a fixed seed.
    """
    _check_head(model, config)
    X, y = _as_arrays(data)
    partition = config.partition
    if partition is None and config.blocks > 1:
        partition = make_partition(model.n_params, config.blocks, config.block_policy, config.reg, config.rng_seed)
    holder = {"state": None}

    def step(w, batch, n):
        st = holder["state"]
        if st is None:
            d0 = None
            if config.d0 == "first_batch":
                d0 = batch_gradient(model.with_weights(w), batch, config.loss)
            st = initial_state(w, config, d0)
        st = sca_iteration(st, batch, model, config, manifold, partition, n_train=X.shape[0])
        holder["state"] = st
        return st.w

    return _run(model, data, config, "sca", step, manifold, test)


def stochastic_gradient(model: MlpModel, batch: MiniBatch, config: ScaConfig, manifold=None, n_train=None):
    """Mini-batch gradient of the regularized objective (subgradient for
    non-smooth penalties)."""
    g = batch_gradient(model, batch, config.loss)
    reg = config.reg
    if reg is not None and reg.lam:
        g = g + reg.lam * reg.gradient(model.w)
    if manifold is not None and manifold.lam:
        scale = (n_train or manifold.graph.n_nodes) / len(batch)
        g = g + manifold.lam * scale * manifold.gradient(model.w, model, batch.indices)
    return g


def train_baseline(model: MlpModel, data, optimizer, config: ScaConfig, name: str | None = None,
                   manifold: Manifold | None = None, test=None):
    """Train with a first-order optimizer on the same batch stream as :func:`train`."""
    _check_head(model, config)
    X, _ = _as_arrays(data)

    def step(w, batch, n):
        g = stochastic_gradient(model.with_weights(w), batch, config, manifold, X.shape[0])
        return optimizer.step(w, g)

    return _run(model, data, config, name or type(optimizer).__name__.lower(), step, manifold, test)
