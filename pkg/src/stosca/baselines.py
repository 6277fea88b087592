"""First-order reference optimizers: SGD, Adagrad, RMSProp, Adam.

Each optimizer is a small stateful object whose ``step(w, grad)`` returns the
updated weights.  They are driven by :func:`stosca.sca_engine.train_baseline`
on the same mini-batch stream as the SCA engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sca_engine import step_size_next

KINDS = ("sgd", "adagrad", "rmsprop", "adam")


def sgd_step(w, grad, alpha):
    return np.asarray(w, dtype=float) - alpha * np.asarray(grad, dtype=float)


@dataclass
class SGD:
    """Plain SGD with the quadratically decreasing step size."""

    alpha0: float = 0.1
    eps: float = 0.01
    alpha: float = field(init=False)

    def __post_init__(self):
        if self.alpha0 <= 0:
            raise ValueError("learning rate must be positive")
        self.alpha = self.alpha0

    def step(self, w, grad):
        w = sgd_step(w, grad, self.alpha)
        self.alpha = step_size_next(self.alpha, self.eps)
        return w


@dataclass
class Adagrad:
    lr: float = 0.01
    eps: float = 1e-8
    accum: np.ndarray | None = field(default=None, init=False, repr=False)

    def step(self, w, grad):
        grad = np.asarray(grad, dtype=float)
        if self.accum is None:
            self.accum = np.zeros_like(grad)
        self.accum += grad * grad
        return w - self.lr * grad / (np.sqrt(self.accum) + self.eps)


@dataclass
class RMSProp:
    lr: float = 0.01
    gamma: float = 0.9
    eps: float = 1e-8
    avg: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    def step(self, w, grad):
        grad = np.asarray(grad, dtype=float)
        if self.avg is None:
            self.avg = np.zeros_like(grad)
        self.avg = self.gamma * self.avg + (1.0 - self.gamma) * grad * grad
        return w - self.lr * grad / (np.sqrt(self.avg) + self.eps)


@dataclass
class Adam:
    """Adam with the constants of its original publication."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = field(default=0, init=False)
    m: np.ndarray | None = field(default=None, init=False, repr=False)
    v: np.ndarray | None = field(default=None, init=False, repr=False)

    def step(self, w, grad):
        grad = np.asarray(grad, dtype=float)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return w - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adagrad_step(state: Adagrad, w, grad):
    return state.step(w, grad)


def rmsprop_step(state: RMSProp, w, grad):
    return state.step(w, grad)


def adam_step(state: Adam, w, grad):
    return state.step(w, grad)


def make_optimizer(kind: str, **params):
    kind = kind.lower()
    cls = {"sgd": SGD, "adagrad": Adagrad, "rmsprop": RMSProp, "adam": Adam}.get(kind)
    if cls is None:
        raise ValueError(f"unknown baseline {kind!r}; choose from {KINDS}")
    return cls(**params)
