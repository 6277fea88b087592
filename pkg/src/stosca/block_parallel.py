"""Block decomposition of the surrogate step.

The parameter vector is split into disjoint blocks.  Each block's surrogate
is the full surrogate with every other block frozen at ``w_n``; all blocks
read the same frozen point (Jacobi style), so the aggregated result does not
depend on the number of workers or on the order blocks finish.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .objective import GroupSparse
from .surrogate import (
    LogisticSurrogate,
    RidgeSurrogate,
    SparseSurrogate,
    solve,
    solve_ridge,
)

POLICIES = ("static", "random_per_iteration")


@dataclass(frozen=True)
class BlockPartition:
    blocks: tuple
    policy: str = "static"
    seed: int = 0
    groups: tuple | None = None

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown assignment policy {self.policy!r}")
        blocks = tuple(np.sort(np.asarray(b, dtype=np.int64)) for b in self.blocks)
        if not blocks or any(b.size == 0 for b in blocks):
            raise ValueError("blocks must be non-empty")
        flat = np.concatenate(blocks)
        Q = flat.size
        if np.unique(flat).size != Q or flat.min() != 0 or flat.max() != Q - 1:
            raise ValueError("blocks must be disjoint and cover 0..Q-1")
        object.__setattr__(self, "blocks", blocks)

    @property
    def n_params(self) -> int:
        return sum(b.size for b in self.blocks)

    def __len__(self):
        return len(self.blocks)

    def blocks_for(self, iteration: int) -> tuple:
        """Blocks in force at ``iteration`` (reshuffled under the random policy)."""
        if self.policy == "static":
            return self.blocks
        rng = np.random.default_rng([self.seed, iteration])
        units = self.groups if self.groups is not None else [np.array([j]) for j in range(self.n_params)]
        order = rng.permutation(len(units))
        return _chunk([units[i] for i in order], len(self.blocks), contiguous=self.groups is None)


def _chunk(units, C, contiguous=False):
    if contiguous:
        flat = np.concatenate(units)
        return tuple(np.sort(b) for b in np.array_split(flat, C))
    sizes = np.array([u.size for u in units])
    total = sizes.sum()
    blocks, cur, acc = [], [], 0
    for i, u in enumerate(units):
        cur.append(u)
        acc += u.size
        left_units = len(units) - i - 1
        left_blocks = C - len(blocks) - 1
        if left_blocks == 0:
            continue
        if acc >= total * (len(blocks) + 1) / C or left_units == left_blocks:
            blocks.append(np.sort(np.concatenate(cur)))
            cur = []
    blocks.append(np.sort(np.concatenate(cur)))
    return tuple(blocks)


def make_partition(Q: int, C: int, policy: str = "static", reg=None, seed: int = 0) -> BlockPartition:
    """Split ``0..Q-1`` into ``C`` near-equal blocks.

    Under a group-sparse regularizer whole groups are assigned to blocks.
    """
    if not 1 <= C <= Q:
        raise ValueError(f"need 1 <= C <= Q, got C={C}, Q={Q}")
    if isinstance(reg, GroupSparse):
        groups = tuple(reg.groups)
        if C > len(groups):
            raise ValueError(f"cannot form {C} blocks from {len(groups)} groups")
        part = BlockPartition(_chunk(list(groups), C), policy, seed, groups)
    else:
        part = BlockPartition(tuple(np.array_split(np.arange(Q), C)), policy, seed)
    if policy == "random_per_iteration":
        part = BlockPartition(part.blocks_for(0), policy, seed, part.groups)
    return part


# ---------------------------------------------------------------------------


def restrict(s, block: np.ndarray, frozen: np.ndarray | None = None, Aw: np.ndarray | None = None):
    """Surrogate in the variables ``block`` with the rest frozen at ``frozen``
    (default ``s.w_n``).  ``Aw`` may carry a precomputed ``A @ frozen``."""
    block = np.asarray(block, dtype=np.int64)
    if isinstance(s, SparseSurrogate):
        return SparseSurrogate(restrict(s.quad, block, frozen, Aw), s.penalty.restrict(block))
    if isinstance(s, RidgeSurrogate):
        w0 = s.w_n if frozen is None else frozen
        if Aw is None:
            Aw = s.matvec(w0)
        wc = w0[block]
        if s.factor is not None:
            Hc = s.factor[:, block]
            Acc_wc = Hc.T @ (Hc @ wc)
            return RidgeSurrogate(s.b[block] - Aw[block] + Acc_wc, s.lam, s.tau, s.w_n[block], factor=Hc)
        Acc = s.dense[np.ix_(block, block)]
        return RidgeSurrogate(s.b[block] - Aw[block] + Acc @ wc, s.lam, s.tau, s.w_n[block], dense=Acc)
    if isinstance(s, LogisticSurrogate):
        w0 = s.w_n if frozen is None else frozen
        mask = np.ones(s.w_n.size, dtype=bool)
        mask[block] = False
        z0 = s.z0 + s.JL[:, mask] @ (w0[mask] - s.w_n[mask])
        extra_H = extra_t = None
        if s.extra_H is not None:
            extra_H = s.extra_H[:, block]
            extra_t = s.extra_t - s.extra_H[:, mask] @ w0[mask]
        return LogisticSurrogate(
            z0, s.JL[:, block], s.targets, s.rho, s.lam, s.tau, s.d_n[block], s.w_n[block],
            s.reg_variant, extra_H, extra_t, s.extra_weight,
        )
    raise TypeError(f"unknown surrogate type {type(s).__name__}")


def solve_block_ridge(s: RidgeSurrogate, part: BlockPartition, c: int, w_n) -> np.ndarray:
    """Closed-form solution of block ``c``:
    ``(A_cc + (lam+tau) I)^{-1} (b_c + tau w_c - A_{c,-c} w_{-c})``."""
    if not 0 <= c < len(part):
        raise IndexError(f"block id {c} out of range for {len(part)} blocks")
    return solve_ridge(restrict(s, part.blocks[c], np.asarray(w_n, dtype=float)))


def parallel_surrogate_step(s, part: BlockPartition, w_n, worker_count: int = 1, iteration: int = 0) -> np.ndarray:
    """Solve every block from the same frozen ``w_n`` and aggregate."""
    if worker_count < 1:
        raise ValueError("worker_count must be at least 1")
    w_n = np.asarray(w_n, dtype=float)
    blocks = part.blocks_for(iteration)
    Aw = None
    base = s.quad if isinstance(s, SparseSurrogate) else s
    if isinstance(base, RidgeSurrogate):
        Aw = base.matvec(w_n)

    def work(block):
        return solve(restrict(s, block, w_n, Aw))

    if worker_count == 1 or len(blocks) == 1:
        results = [work(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=worker_count) as pool:
            results = list(pool.map(work, blocks))
    out = np.empty_like(w_n)
    for b, r in zip(blocks, results):
        out[b] = r
    return out


def measure_speedup(instance, C_values, worker_counts, repetitions: int = 20):
    """Median wall time of one block-parallel surrogate solve per (C, workers).

    Speedups are relative to ``C=1`` with a single worker.
    """
    Q = instance.n_params if isinstance(instance, RidgeSurrogate) else instance.w_n.size
    rows = []
    timings = {}
    pairs = [(1, 1)] + [(C, k) for C in C_values for k in worker_counts if (C, k) != (1, 1)]
    for C, k in pairs:
        part = make_partition(Q, C)
        samples = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            parallel_surrogate_step(instance, part, instance.w_n, k)
            samples.append(time.perf_counter() - t0)
        timings[(C, k)] = float(np.median(samples))
    ref = timings[(1, 1)]
    for C in C_values:
        for k in worker_counts:
            t = timings[(C, k)]
            rows.append({"C": C, "workers": k, "median_s": t, "speedup": ref / t})
    return rows
