"""Clustering and gene-selection metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_vectors(cls, truth, pred) -> "ConfusionCounts":
        truth, pred = _binary_pair(truth, pred)
        return cls(int(np.sum(truth & pred)), int(np.sum(~truth & ~pred)),
                   int(np.sum(~truth & pred)), int(np.sum(truth & ~pred)))


def _binary_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    for v in (a, b):
        if not np.isin(v, (0, 1)).all():
            raise ValueError("indicator vectors must be 0/1")
    return a.astype(bool), b.astype(bool)


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return int(np.sum(x * (x - 1) // 2))


def ari(z_true, z_hat) -> float:
    """Adjusted Rand index from pair counts, evaluated as one exact integer ratio."""
    z_true, z_hat = np.asarray(z_true), np.asarray(z_hat)
    if z_true.shape != z_hat.shape or z_true.ndim != 1:
        raise ValueError(f"length mismatch: {z_true.shape} vs {z_hat.shape}")
    n = len(z_true)
    _, a_idx = np.unique(z_true, return_inverse=True)
    _, b_idx = np.unique(z_hat, return_inverse=True)
    table = np.zeros((a_idx.max(initial=-1) + 1, b_idx.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (a_idx, b_idx), 1)
    pairs = n * (n - 1) // 2
    both = _comb2(table)                       # A: together in both
    rows = _comb2(table.sum(axis=1))           # A + B
    cols = _comb2(table.sum(axis=0))           # A + C
    num = 2 * (pairs * both - rows * cols)
    den = pairs * (rows + cols) - 2 * rows * cols
    if den == 0:
        # only when both partitions are all-singletons or both are one block
        return 1.0
    return num / den


def confusion_metrics(gamma_true, gamma_hat):
    """``(sensitivity, specificity, mcc)``; an undefined ratio is reported as 0."""
    c = ConfusionCounts.from_vectors(gamma_true, gamma_hat)
    sens = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    spec = c.tn / (c.tn + c.fp) if c.tn + c.fp else 0.0
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den) if den else 0.0
    return sens, spec, mcc


def auc(gamma_true, ppi) -> float:
    """Mann-Whitney estimate of P(score of a positive > score of a negative), ties as 1/2."""
    truth = np.asarray(gamma_true)
    scores = np.asarray(ppi, dtype=float)
    if truth.shape != scores.shape or truth.ndim != 1:
        raise ValueError(f"length mismatch: {truth.shape} vs {scores.shape}")
    if not np.isin(truth, (0, 1)).all():
        raise ValueError("truth must be 0/1")
    truth = truth.astype(bool)
    n_pos, n_neg = int(truth.sum()), int((~truth).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
