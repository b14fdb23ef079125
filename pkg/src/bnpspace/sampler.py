"""MCMC for the zero-inflated Poisson MRF-MFM model with gene selection.

One sweep updates, in order: the DG indicators (Metropolis search with all
expression means integrated out), a fresh draw of the means so none is
stale after a flip, the spot allocations (collapsed Pólya urn with births
and deaths), the expression means again, the extra-zero indicators and the
per-spot extra-zero proportions.

Cluster labels are 0-based throughout the library.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import gammaln

from . import _kernels
from .data import CountMatrix, SizeFactors, SpatialGraph
from .mfm import MfmConfig, VnTable, compute_vn_table, relabel_contiguous

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hyperparams:
    alpha_mu: float = 1.0
    beta_mu: float = 1.0
    alpha_pi: float = 1.0
    beta_pi: float = 1.0
    alpha_omega: float = 0.1
    beta_omega: float = 1.9
    rho: float = 0.5

    def __post_init__(self):
        for name in ("alpha_mu", "beta_mu", "alpha_pi", "beta_pi", "alpha_omega", "beta_omega"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if abs(self.alpha_omega + self.beta_omega - 2.0) > 1e-12:
            warnings.warn("alpha_omega + beta_omega != 2; the prior on omega is no longer the vague default",
                          stacklevel=2)


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 10000
    burn_in: int = 5000
    thin: int = 1
    seed: int = 0
    record_r: bool = True
    gamma_steps: int | None = None  # Metropolis proposals per sweep; None -> max(10, ceil(p / 10))
    warmup: int = 0                 # leading sweeps with gamma held at its initial value
    init_gamma: str = "all"         # "all" genes on, or "prior" Bernoulli draws
    init_z: str = "kmeans"          # "kmeans" on principal components, or "random" labels
    k_init: int = 5
    block: int = 250

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must lie in [0, iterations)")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.gamma_steps is not None and self.gamma_steps < 1:
            raise ValueError("gamma_steps must be at least 1")
        if not 0 <= self.warmup <= self.burn_in:
            raise ValueError("warmup must lie in [0, burn_in]")
        if self.init_gamma not in ("prior", "all"):
            raise ValueError("init_gamma must be 'prior' or 'all'")
        if self.init_z not in ("random", "kmeans"):
            raise ValueError("init_z must be 'random' or 'kmeans'")
        if self.k_init < 1:
            raise ValueError("k_init must be at least 1")

    @property
    def n_recorded(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))

    def steps_for(self, p: int) -> int:
        return self.gamma_steps if self.gamma_steps is not None else max(10, math.ceil(p / 10))


@dataclass
class ModelState:
    z: np.ndarray          # (n,) labels 0..K-1, every cluster nonempty
    gamma: np.ndarray      # (p,) 0/1
    r: np.ndarray          # (n, p) 0/1, r_ij = 1 only where y_ij = 0
    mu_star: np.ndarray    # (K, p)
    mu0: np.ndarray        # (p,)
    pi: np.ndarray         # (n,)

    @property
    def K(self) -> int:
        return int(self.z.max()) + 1

    def copy(self) -> "ModelState":
        return ModelState(self.z.copy(), self.gamma.copy(), self.r.copy(),
                          self.mu_star.copy(), self.mu0.copy(), self.pi.copy())

    def check(self, y) -> None:
        """Raise AssertionError if any state invariant is broken."""
        K = self.K
        assert np.array_equal(np.unique(self.z), np.arange(K)), "labels not contiguous"
        assert self.mu_star.shape == (K, y.shape[1]), "mu_star rows do not match clusters"
        assert not np.any((self.r == 1) & (y > 0)), "extra zero flagged on a positive count"
        assert np.all(self.mu_star > 0) and np.all(self.mu0 > 0), "nonpositive mean"
        assert np.all((self.pi >= 0) & (self.pi <= 1)), "pi outside [0, 1]"


@dataclass
class ChainTrace:
    z_samples: np.ndarray        # (U, n) int32
    gamma_samples: np.ndarray    # (U, p) uint8
    scores: np.ndarray           # (U, 3): data loglik, log prior gamma, log prior z
    loglik: np.ndarray           # (iterations,)
    k_trace: np.ndarray          # (iterations,)
    gamma_accepts: np.ndarray    # (iterations,)
    mu_spot_sum: np.ndarray      # (n, p) sum over samples of mu*_{z_i, j}
    mu0_sum: np.ndarray          # (p,)
    r_sum: np.ndarray | None     # (n, p) or None when R was not recorded
    recorded_iterations: np.ndarray
    seconds: float = 0.0

    @property
    def n_samples(self) -> int:
        return len(self.z_samples)

    @property
    def map_scores(self) -> np.ndarray:
        return self.scores.sum(axis=1)

    def mu_spot_mean(self) -> np.ndarray:
        return self.mu_spot_sum / self.n_samples

    def mu0_mean(self) -> np.ndarray:
        return self.mu0_sum / self.n_samples

    def r_mean(self) -> np.ndarray | None:
        return None if self.r_sum is None else self.r_sum / self.n_samples


# ---------------------------------------------------------------------------
# Likelihood pieces
# ---------------------------------------------------------------------------

def gene_cluster_marginal_loglik(ys, ss, alpha_mu: float = 1.0, beta_mu: float = 1.0) -> float:
    """log ∫ prod_i Poi(y_i | s_i mu) Ga(mu | alpha_mu, beta_mu) dmu (rate parametrization)."""
    ys = np.asarray(ys, dtype=float)
    ss = np.asarray(ss, dtype=float)
    if ys.shape != ss.shape:
        raise ValueError("counts and size factors differ in length")
    if ys.size == 0:
        return 0.0
    if np.any(ss <= 0):
        raise ValueError("size factors must be positive")
    sum_y = ys.sum()
    const = float(np.sum(ys * np.log(ss) - gammaln(ys + 1)))
    return const + _kernels.log_marginal(sum_y, ss.sum(), float(alpha_mu), float(beta_mu))


def _loglik_const(y, s):
    return float(np.sum(y * np.log(s)[:, None]) - np.sum(gammaln(y + 1.0)))


def data_log_likelihood(state: ModelState, counts: CountMatrix, sf: SizeFactors) -> float:
    y = counts.values
    r = np.asarray(state.r, dtype=np.uint8)
    if np.any((r == 1) & (y > 0)):
        i, j = np.argwhere((r == 1) & (y > 0))[0]
        raise ValueError(f"extra-zero indicator set on positive count at spot {i}, gene {j}")
    return float(_kernels.data_loglik(
        y, sf.s, r, np.asarray(state.z, dtype=np.int64), np.asarray(state.gamma, dtype=np.uint8),
        np.log(state.mu_star), state.mu_star, np.log(state.mu0), state.mu0, _loglik_const(y, sf.s)))


def gene_log_bayes_factors(state: ModelState, counts: CountMatrix, sf: SizeFactors, hp: Hyperparams) -> np.ndarray:
    """Per-gene log evidence ratio (DG over non-DG) given z and R, means integrated out."""
    return _kernels.gene_log_bayes_factors(
        counts.values, sf.s, np.asarray(state.r, dtype=np.uint8), np.asarray(state.z, dtype=np.int64),
        state.K, float(hp.alpha_mu), float(hp.beta_mu))


# ---------------------------------------------------------------------------
# Single-step updates on a ModelState (each returns a new state)
# ---------------------------------------------------------------------------

def _arrays(state: ModelState, cap: int | None = None):
    K, p = state.mu_star.shape
    cap = max(cap or 0, K + 1)
    mu = np.ones((cap, p))
    mu[:K] = state.mu_star
    return (np.asarray(state.z, dtype=np.int64).copy(), np.asarray(state.gamma, dtype=np.uint8).copy(),
            np.asarray(state.r, dtype=np.uint8).copy(), mu, np.log(mu),
            np.asarray(state.mu0, dtype=float).copy(), np.asarray(state.pi, dtype=float).copy())


def update_gamma(state: ModelState, counts: CountMatrix, sf: SizeFactors, hp: Hyperparams, rng,
                 n_steps: int = 1) -> ModelState:
    log_bf = gene_log_bayes_factors(state, counts, sf, hp)
    gamma = np.asarray(state.gamma, dtype=np.uint8).copy()
    _kernels.gamma_steps(gamma, log_bf, n_steps, float(hp.rho),
                         float(hp.alpha_omega), float(hp.beta_omega), rng)
    return replace(state.copy(), gamma=gamma)


def update_mu(state: ModelState, counts: CountMatrix, sf: SizeFactors, hp: Hyperparams, rng) -> ModelState:
    z, gamma, r, mu, log_mu, mu0, pi = _arrays(state)
    K = state.K
    _kernels.mu_update(counts.values, sf.s, r, z, K, gamma, mu, log_mu, mu0, np.log(mu0),
                       float(hp.alpha_mu), float(hp.beta_mu), rng)
    return ModelState(z, gamma, r, mu[:K].copy(), mu0, pi)


def update_r(state: ModelState, counts: CountMatrix, sf: SizeFactors, rng) -> ModelState:
    z, gamma, r, mu, _, mu0, pi = _arrays(state)
    _kernels.r_update(counts.values, sf.s, z, gamma, mu, mu0, pi, r, rng)
    return ModelState(z, gamma, r, mu[:state.K].copy(), mu0, pi)


def update_pi(state: ModelState, hp: Hyperparams, rng) -> ModelState:
    new = state.copy()
    pi = new.pi.astype(float)
    _kernels.pi_update(np.asarray(new.r, dtype=np.uint8), pi, float(hp.alpha_pi), float(hp.beta_pi), rng)
    new.pi = pi
    return new


def update_z(state: ModelState, counts: CountMatrix, sf: SizeFactors, graph: SpatialGraph,
             vn: VnTable, cfg: MfmConfig, hp: Hyperparams, rng) -> ModelState:
    """One sequential pass over spots; the V_n table is extended as needed."""
    y = counts.values
    n = y.shape[0]
    z, gamma, r, mu, log_mu, mu0, pi = _arrays(state, cap=n + 1)
    sizes = np.zeros(n + 1, dtype=np.int64)
    np.add.at(sizes, z, 1)
    K = state.K
    nb = np.zeros(n + 2, dtype=np.int64)
    w = np.empty(n + 2)
    spot = 0
    while True:
        spot, K, status = _kernels.z_update(
            spot, y, sf.s, r, z, sizes, K, gamma, mu, log_mu, graph.indptr, graph.indices,
            np.asarray(vn.log_v), float(cfg.alpha0), float(cfg.d),
            float(hp.alpha_mu), float(hp.beta_mu), rng, nb, w)
        if status == _kernels.OK:
            break
        vn = vn.extended(2 * vn.t_max)
    return ModelState(z, gamma, r, mu[:K].copy(), mu0, pi)


def z_conditional_log_weights(state: ModelState, i: int, counts: CountMatrix, sf: SizeFactors,
                              graph: SpatialGraph, vn: VnTable, cfg: MfmConfig, hp: Hyperparams):
    """Unnormalized log conditional of z_i used by the sampler.

    Returns ``(labels, log_w)``: ``labels`` holds each option's label in the
    reduced state (clusters of the other spots relabeled contiguously) and
    ``-1`` for a new cluster. Terms common to every option are omitted.
    """
    y = counts.values
    n = y.shape[0]
    z, gamma, r, mu, log_mu, mu0, pi = _arrays(state, cap=n + 1)
    sizes = np.zeros(n + 1, dtype=np.int64)
    np.add.at(sizes, z, 1)
    K = _kernels.remove_spot(i, z, sizes, state.K, mu, log_mu)
    vn = vn.extended(K + 1)
    out = np.empty(K + 1)
    _kernels.spot_log_weights(i, y, sf.s, r, z, sizes, K, gamma, log_mu, mu, graph.indptr, graph.indices,
                              np.asarray(vn.log_v), float(cfg.alpha0), float(cfg.d),
                              float(hp.alpha_mu), float(hp.beta_mu), np.zeros(K + 1, dtype=np.int64), out)
    return z, out


# ---------------------------------------------------------------------------
# Full chain
# ---------------------------------------------------------------------------

def kmeans_labels(counts: CountMatrix, s, k: int, rng, n_components: int = 10) -> np.ndarray:
    """k-means on the leading principal components of centred log1p(y / s).

    Genes are centred but not scaled, so genes whose spread exceeds Poisson
    noise dominate the components.
    """
    x = np.log1p(counts.values / np.asarray(s, dtype=float)[:, None])
    x = x - x.mean(axis=0)
    if not np.any(x):
        return np.zeros(counts.n, dtype=np.int64)
    u, sv, _ = np.linalg.svd(x, full_matrices=False)
    scores = u[:, :n_components] * sv[:n_components]
    k = min(k, counts.n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # empty k-means clusters are harmless here
        _, labels = kmeans2(scores, k, minit="++", seed=rng)
    return relabel_contiguous(labels)


def initial_state(counts: CountMatrix, hp: Hyperparams, rng, k_init: int = 5,
                  init_gamma: str = "all", init_z: str = "kmeans", s=None) -> ModelState:
    y = counts.values
    n, p = y.shape
    if init_z == "kmeans":
        z = kmeans_labels(counts, np.ones(n) if s is None else s, k_init, rng)
    else:
        z = relabel_contiguous(rng.integers(0, min(k_init, n), size=n))
    K = int(z.max()) + 1
    gamma = (rng.random(p) < hp.alpha_omega / (hp.alpha_omega + hp.beta_omega)).astype(np.uint8)
    if init_gamma == "all":
        gamma[:] = 1
    r = ((y == 0) & (rng.random((n, p)) < 0.5)).astype(np.uint8)
    mu_star = np.maximum(rng.gamma(hp.alpha_mu, 1.0 / hp.beta_mu, size=(K, p)), 1e-300)
    mu0 = np.maximum(rng.gamma(hp.alpha_mu, 1.0 / hp.beta_mu, size=p), 1e-300)
    pi = np.full(n, 0.5)
    return ModelState(z, gamma, r, mu_star, mu0, pi)


def run_chain(counts: CountMatrix, sf: SizeFactors, graph: SpatialGraph, hp: Hyperparams,
              cfg: MfmConfig, mcmc: McmcConfig, init: ModelState | None = None) -> ChainTrace:
    y = counts.values
    n, p = y.shape
    if len(sf.s) != n or graph.n != n:
        raise ValueError(f"inconsistent inputs: counts n={n}, size factors {len(sf.s)}, graph {graph.n}")
    rng = np.random.default_rng(mcmc.seed)
    state = init.copy() if init is not None else initial_state(counts, hp, rng, mcmc.k_init, mcmc.init_gamma,
                                                                         mcmc.init_z, sf.s)
    state.check(y)

    K = state.K
    cap = min(n + 1, max(32, 2 * K + 1))
    z, gamma, r, mu, log_mu, mu0, pi = _arrays(state, cap=cap)
    log_mu0 = np.log(mu0)
    sizes = np.zeros(cap, dtype=np.int64)
    np.add.at(sizes, z, 1)
    vn = compute_vn_table(n, cfg, min(n, max(50, K + 1)))

    U = mcmc.n_recorded
    loglik = np.full(mcmc.iterations, np.nan)
    k_trace = np.zeros(mcmc.iterations, dtype=np.int64)
    accepts = np.zeros(mcmc.iterations, dtype=np.int64)
    z_samples = np.empty((U, n), dtype=np.int32)
    gamma_samples = np.empty((U, p), dtype=np.uint8)
    scores = np.empty((U, 3))
    mu_spot_sum = np.zeros((n, p))
    mu0_sum = np.zeros(p)
    r_sum = np.zeros((n, p), dtype=np.int64) if mcmc.record_r else np.zeros((1, 1), dtype=np.int64)
    const = _loglik_const(y, sf.s)
    n_steps = mcmc.steps_for(p)

    t0 = time.perf_counter()
    it, resume, rec = 0, -1, 0
    while it < mcmc.iterations:
        stop = min(mcmc.iterations, it + mcmc.block)
        steps = n_steps
        if it < mcmc.warmup:
            stop = min(stop, mcmc.warmup)
            steps = 0
        status, it_ret, spot, K, rec = _kernels.run_sweeps(
            y, sf.s, r, z, sizes, K, gamma, mu, log_mu, mu0, log_mu0, pi,
            graph.indptr, graph.indices, np.asarray(vn.log_v), float(cfg.alpha0), float(cfg.d),
            float(hp.alpha_mu), float(hp.beta_mu), float(hp.alpha_pi), float(hp.beta_pi),
            float(hp.alpha_omega), float(hp.beta_omega), float(hp.rho), steps, const,
            it, stop, resume, mcmc.burn_in, mcmc.thin,
            loglik, k_trace, accepts, z_samples, gamma_samples, scores, rec,
            mu_spot_sum, mu0_sum, r_sum, mcmc.record_r, rng)
        done = stop if status == _kernels.OK else it_ret
        bad = np.flatnonzero(~np.isfinite(loglik[it:done]))
        if bad.size:
            raise FloatingPointError(f"non-finite log-likelihood at iteration {it + bad[0]}")
        if status == _kernels.OK:
            it, resume = stop, -1
            logger.debug("iteration %d: K=%d, loglik=%.3f", it, K, loglik[it - 1])
            continue
        it, resume = it_ret, spot
        if status == _kernels.NEED_VN:
            vn = vn.extended(2 * vn.t_max)
        else:
            new_cap = min(n + 1, 2 * cap)
            mu = np.vstack([mu, np.ones((new_cap - cap, p))])
            log_mu = np.vstack([log_mu, np.zeros((new_cap - cap, p))])
            sizes = np.concatenate([sizes, np.zeros(new_cap - cap, dtype=np.int64)])
            cap = new_cap

    return ChainTrace(
        z_samples=z_samples, gamma_samples=gamma_samples, scores=scores,
        loglik=loglik, k_trace=k_trace, gamma_accepts=accepts,
        mu_spot_sum=mu_spot_sum, mu0_sum=mu0_sum,
        r_sum=r_sum if mcmc.record_r else None,
        recorded_iterations=np.arange(mcmc.burn_in, mcmc.iterations, mcmc.thin),
        seconds=time.perf_counter() - t0,
    )
