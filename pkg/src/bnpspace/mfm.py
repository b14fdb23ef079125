"""Mixture-of-finite-mixtures partition prior with Markov random field coupling.

The number of components K has a shifted Poisson prior (K - 1 ~ Poisson(lam))
and component weights are symmetric Dirichlet(alpha0). Integrating both out
gives a prior over partitions of n spots,

    P(C) ∝ V_n(t) * prod_c Gamma(alpha0 + |c|) / Gamma(alpha0) * exp(d * E_c),

where t is the number of blocks and E_c counts neighbor pairs inside block c.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .data import SpatialGraph


@dataclass(frozen=True)
class MfmConfig:
    alpha0: float = 1.0
    lam: float = 1.0
    d: float = 0.0

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not self.d >= 0:
            raise ValueError("MRF coupling d must be nonnegative")


@dataclass(frozen=True)
class VnTable:
    n: int
    log_v: np.ndarray  # index t holds log V_n(t); index 0 is unused
    k_max: int
    cfg: MfmConfig
    rel_tol: float = 1e-12

    @property
    def t_max(self) -> int:
        return len(self.log_v) - 1

    def __getitem__(self, t: int) -> float:
        if not 1 <= t <= self.t_max:
            raise IndexError(f"V_n table covers t = 1..{self.t_max}, asked for {t}")
        return float(self.log_v[t])

    def extended(self, t_max: int) -> "VnTable":
        """Return a new table covering at least ``t_max`` (capped at n)."""
        t_max = min(max(t_max, self.t_max), self.n)
        if t_max == self.t_max:
            return self
        return compute_vn_table(self.n, self.cfg, t_max, self.rel_tol)


def _log_vn_single(n, t, alpha0, lam, rel_tol, k_max, run=30):
    # log of t! C(K, t) Gamma(K a) / Gamma(n + K a) P(K), with K - 1 ~ Poisson(lam)
    log_terms = []
    total = -math.inf
    small = 0
    log_tol = math.log(rel_tol)
    log_lam = math.log(lam)
    for K in range(t, k_max + 1):
        term = (math.lgamma(K + 1) - math.lgamma(K - t + 1)
                + math.lgamma(K * alpha0) - math.lgamma(n + K * alpha0)
                - lam + (K - 1) * log_lam - math.lgamma(K))
        total = np.logaddexp(total, term)
        log_terms.append(term)
        if term - total < log_tol:
            small += 1
            if small >= run:
                break
        else:
            small = 0
    # resum from the smallest terms up for accuracy
    return float(logsumexp(np.array(log_terms[::-1])))


def compute_vn_table(n: int, cfg: MfmConfig, t_max: int | None = None, rel_tol: float = 1e-12) -> VnTable:
    """Tabulate log V_n(t) for t = 1..t_max (default min(n, 50))."""
    if n < 1:
        raise ValueError("n must be positive")
    if t_max is None:
        t_max = min(n, 50)
    if not 1 <= t_max <= n:
        raise ValueError(f"t_max must lie in 1..n={n}, got {t_max}")
    k_max = max(1000, 10 * n)
    log_v = np.full(t_max + 1, np.nan)
    for t in range(1, t_max + 1):
        log_v[t] = _log_vn_single(n, t, cfg.alpha0, cfg.lam, rel_tol, k_max)
    if not np.all(np.isfinite(log_v[1:])):
        raise FloatingPointError("non-finite V_n coefficient")
    log_v.setflags(write=False)
    return VnTable(n, log_v, k_max, cfg, rel_tol)


def urn_existing_log_weight(n_k_minus_i: int, neighbor_count_k: int, cfg: MfmConfig) -> float:
    """log[(n_k,-i + alpha0) * exp(d * neighbors of i in k)]."""
    if n_k_minus_i < 1:
        raise ValueError("existing cluster must be nonempty after removing the spot")
    return math.log(n_k_minus_i + cfg.alpha0) + cfg.d * neighbor_count_k


def urn_new_log_weight(t: int, vn: VnTable, cfg: MfmConfig) -> float:
    """log[alpha0 * V_n(t + 1) / V_n(t)] for t clusters among the other spots."""
    if t < 1:
        raise ValueError("t must be at least 1")
    if t + 1 > vn.t_max:
        raise IndexError(f"V_n table stops at t={vn.t_max}; extend it to at least {t + 1}")
    return math.log(cfg.alpha0) + vn[t + 1] - vn[t]


def relabel_contiguous(z) -> np.ndarray:
    """Map labels to 0..K-1 in order of first appearance."""
    z = np.asarray(z)
    _, first, inverse = np.unique(z, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse].astype(np.int64)


def _check_contiguous(z):
    z = np.asarray(z, dtype=np.int64)
    if z.size == 0:
        raise ValueError("empty label vector")
    uniq = np.unique(z)
    if uniq[0] != 0 or uniq[-1] != len(uniq) - 1:
        raise ValueError("labels must be contiguous integers starting at 0")
    return z, len(uniq)


def partition_log_prior(z, graph: SpatialGraph, vn: VnTable, cfg: MfmConfig) -> float:
    """Unnormalized log prior of the partition induced by 0-based contiguous labels."""
    z, K = _check_contiguous(z)
    if len(z) != vn.n or len(z) != graph.n:
        raise ValueError("label vector, graph and V_n table disagree on n")
    if K > vn.t_max:
        vn = vn.extended(K)
    return float(_kernels.partition_log_prior_labels(
        z, K, graph.indptr, graph.indices, vn.log_v, float(cfg.alpha0), float(cfg.d)))


def within_cluster_edges(z, graph: SpatialGraph) -> int:
    z = np.asarray(z)
    rows = np.repeat(np.arange(graph.n), graph.degrees())
    mask = (graph.indices > rows) & (z[rows] == z[graph.indices])
    return int(mask.sum())


def sample_prior_partitions(graph: SpatialGraph, cfg: MfmConfig, sweeps: int, rng,
                            vn: VnTable | None = None, z0=None) -> np.ndarray:
    """Gibbs draws from the partition prior driven by the urn conditionals alone.

    Returns a (sweeps, n) array of 0-based labels, one row per full sweep.
    """
    n = graph.n
    if vn is None:
        vn = compute_vn_table(n, cfg, n)
    z = np.zeros(n, dtype=np.int64) if z0 is None else relabel_contiguous(z0)
    K = int(z.max()) + 1
    sizes = np.zeros(n + 1, dtype=np.int64)
    np.add.at(sizes, z, 1)
    out = np.empty((sweeps, n), dtype=np.int64)
    _kernels.prior_sweeps(z, sizes, K, graph.indptr, graph.indices, np.asarray(vn.extended(n).log_v),
                          float(cfg.alpha0), float(cfg.d), out, rng)
    return out
