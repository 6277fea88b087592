"""Test-set metrics and run summaries."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def compute_mse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    if p.size == 0:
        raise ValueError("cannot compute the MSE of an empty set")
    if p.shape != t.shape:
        raise ValueError("predictions and targets differ in length")
    return float(np.mean((p - t) ** 2))


def compute_roc_auc(scores, labels):
    """ROC curve and area under it.

    Tied scores form a single threshold step, so the curve interpolates
    linearly across ties and the trapezoidal area equals the Mann-Whitney
    statistic (ties count one half).  Returns ``((fpr, tpr), auc)``.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(float)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes among the labels")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_tie = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tps = np.cumsum(y_sorted)[last_of_tie]
    fps = (last_of_tie + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    ranks = rankdata(s)
    auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return (fpr, tpr), float(auc)


def mean_std(values):
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), std


def objective_band(records):
    """Per-iteration mean and sample std of the logged objective across runs."""
    lengths = {len(r) for r in records}
    if len(lengths) != 1:
        raise ValueError("records have different log lengths")
    M = np.vstack([r.objective_array() for r in records])
    iters = np.asarray(records[0].iterations)
    std = M.std(axis=0, ddof=1) if M.shape[0] > 1 else np.zeros(M.shape[1])
    return iters, M.mean(axis=0), std


def summarize(records, metric: str | None = None):
    """Group records by optimizer; mean +- std of the final metric and the
    per-iteration objective band.  Failed runs are skipped."""
    by_opt: dict[str, list] = {}
    for r in records:
        if r.status == "ok":
            by_opt.setdefault(r.optimizer, []).append(r)
    table = []
    bands = {}
    for name in sorted(by_opt):
        runs = sorted(by_opt[name], key=lambda r: r.seed)
        key = metric or next(iter(runs[0].metrics), None)
        row = {"optimizer": name, "runs": len(runs)}
        if key is not None:
            m, s = mean_std([r.metrics[key] for r in runs])
            row.update({"metric": key, "mean": m, "std": s})
        fm, fs = mean_std([r.final_objective for r in runs])
        row.update({"final_objective_mean": fm, "final_objective_std": fs})
        table.append(row)
        try:
            bands[name] = objective_band(runs)
        except ValueError:
            pass
    return table, bands
