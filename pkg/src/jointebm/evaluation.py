"""Prediction metrics and the learned log-partition diagnostic."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import nets
from .energy import EnergyModel
from .errors import NotAPermutation, NotUnary, ShapeMismatch
from .inference import ModeSolverConfig, predict
from .losses import unary_log_partition
from .spaces import BINARY, BIRKHOFF, perm_matrix_to_vector


@dataclass
class MetricReport:
    name: str
    value: float
    per_example: np.ndarray | None = None


def f1_example(y_true, y_pred) -> float:
    """Per-instance f1 ``2|y & y_hat| / (|y| + |y_hat|)``; two empty sets score 1."""
    y_true = np.asarray(y_true) > 0.5
    y_pred = np.asarray(y_pred) > 0.5
    if y_true.shape != y_pred.shape:
        raise ShapeMismatch(f"shapes differ: {y_true.shape} vs {y_pred.shape}")
    denom = y_true.sum() + y_pred.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(y_true, y_pred).sum() / denom


def f1_score(Y_true, Y_pred) -> MetricReport:
    """Example-based f1 averaged over rows."""
    Y_true = np.atleast_2d(np.asarray(Y_true) > 0.5)
    Y_pred = np.atleast_2d(np.asarray(Y_pred) > 0.5)
    if Y_true.shape != Y_pred.shape:
        raise ShapeMismatch(f"shapes differ: {Y_true.shape} vs {Y_pred.shape}")
    inter = np.logical_and(Y_true, Y_pred).sum(axis=1)
    denom = Y_true.sum(axis=1) + Y_pred.sum(axis=1)
    per = np.where(denom == 0, 1.0, 2.0 * inter / np.maximum(denom, 1))
    return MetricReport("f1", float(per.mean()) if len(per) else float("nan"), per)


def micro_f1(Y_true, Y_pred) -> MetricReport:
    Y_true = np.atleast_2d(np.asarray(Y_true) > 0.5)
    Y_pred = np.atleast_2d(np.asarray(Y_pred) > 0.5)
    tp = np.logical_and(Y_true, Y_pred).sum()
    denom = Y_true.sum() + Y_pred.sum()
    return MetricReport("micro_f1", 1.0 if denom == 0 else float(2.0 * tp / denom))


def _check_perm(a):
    a = np.asarray(a, dtype=np.float64)
    if not np.array_equal(np.sort(a), np.arange(1, len(a) + 1)):
        raise NotAPermutation(f"{a} is not a permutation of 1..{len(a)}")
    return a


def kendall_tau(y_true, y_pred) -> float:
    """``(concordant - discordant) / (k(k-1)/2)`` between two rank vectors."""
    a, b = _check_perm(y_true), _check_perm(y_pred)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    k = len(a)
    if k < 2:
        return 1.0
    iu = np.triu_indices(k, 1)
    s = np.sign(a[:, None] - a[None, :])[iu] * np.sign(b[:, None] - b[None, :])[iu]
    return float(s.sum() / (k * (k - 1) / 2))


def kendall_score(Y_true, Y_pred) -> MetricReport:
    per = np.array([kendall_tau(a, b) for a, b in zip(np.atleast_2d(Y_true), np.atleast_2d(Y_pred))])
    return MetricReport("kendall", float(per.mean()) if len(per) else float("nan"), per)


METRICS = ("f1", "micro_f1", "kendall")


def default_metric(space) -> str:
    return "f1" if space.kind == BINARY else "kendall"


def score_dataset(model: EnergyModel, dataset, metric="auto", cfg: ModeSolverConfig = ModeSolverConfig()) -> MetricReport:
    """Predict modes for ``dataset`` and score them against its targets."""
    if metric == "auto":
        metric = default_metric(dataset.space)
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")
    if (metric == "kendall") == (dataset.space.kind == BINARY):
        raise ValueError(f"metric {metric!r} does not apply to {dataset.space}")
    pred = predict(model, dataset.xs, cfg)
    truth = dataset.ys
    if dataset.space.kind == BIRKHOFF:
        pred, truth = perm_matrix_to_vector(pred), perm_matrix_to_vector(truth)
    if metric == "f1":
        return f1_score(truth, pred)
    if metric == "micro_f1":
        return micro_f1(truth, pred)
    return kendall_score(truth, pred)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        warnings.warn("Pearson correlation undefined: zero variance", RuntimeWarning, stacklevel=2)
        return float("nan")
    return float((da * db).sum() / denom)


def tau_vs_oracle(tau: nets.Network, g: EnergyModel, xs):
    """Learned ``tau(x)`` against the closed-form log-partition of a unary model.

    Returns ``(pearson_r, pairs)`` with ``pairs`` an ``(n, 2)`` array of
    ``(learned, exact)`` values; ``pearson_r`` is NaN when either side is
    constant.
    """
    if not g.is_unary:
        raise NotUnary("tau_vs_oracle needs a unary model (bilinear coupling over binary vectors)")
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if tau.spec.kind == "table":
        raise NotUnary("a per-example table cannot be evaluated on new inputs")
    learned = tau(xs)[:, 0]
    theta, _ = g.logits(xs)
    exact = unary_log_partition(theta)
    return pearson(learned, exact), np.column_stack([learned, exact])


def write_pairs_csv(path, pairs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["learned_tau", "exact_log_partition"])
        for a, b in pairs:
            w.writerow([repr(float(a)), repr(float(b))])
