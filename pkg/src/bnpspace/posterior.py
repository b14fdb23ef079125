"""Point estimates from a recorded chain.

Gene calls come from posterior probabilities of inclusion (PPI), either by the
median-model rule or by controlling the Bayesian false discovery rate. The
spatial partition is summarized two ways: the recorded sample with the highest
joint score (MAP) and the recorded sample closest in squared error to the
pairwise co-clustering matrix (Dahl's least-squares estimate).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.cluster.hierarchy import cut_tree, linkage

from .mfm import relabel_contiguous
from .sampler import ChainTrace

LINKAGES = ("average", "single", "complete")


@dataclass
class PosteriorSummary:
    ppi: np.ndarray
    gamma_hat: np.ndarray
    gamma_threshold: float
    gamma_map: np.ndarray
    z_map: np.ndarray
    z_ppm: np.ndarray
    ppm: np.ndarray
    mu_hat: np.ndarray          # (k_hat, p), rows follow the labels of z_ppm
    mu0_hat: np.ndarray
    r_hat: np.ndarray | None    # posterior mean of R, None when R was not recorded

    @property
    def k_hat(self) -> int:
        return int(self.z_ppm.max()) + 1


def _require_samples(trace: ChainTrace) -> None:
    if trace.n_samples == 0:
        raise ValueError("trace holds no recorded samples")


def compute_ppi(trace: ChainTrace) -> np.ndarray:
    _require_samples(trace)
    return trace.gamma_samples.mean(axis=0)


def select_dgs(ppi, mode: str = "median", level: float = 0.05):
    """Return ``(gamma_hat, threshold)``.

    In ``bfdr`` mode the threshold c applies to q = 1 - PPI: genes with q < c
    are selected, and c is the largest cutoff whose Bayesian FDR stays at or
    below ``level``. An empty selection reports c = 0.
    """
    ppi = np.asarray(ppi, dtype=float)
    if np.any((ppi < 0) | (ppi > 1)) or np.any(np.isnan(ppi)):
        raise ValueError("PPI values must lie in [0, 1]")
    if mode == "median":
        return (ppi >= 0.5).astype(np.uint8), 0.5
    if mode != "bfdr":
        raise ValueError(f"unknown selection mode {mode!r}; use 'median' or 'bfdr'")
    if not 0 < level < 1:
        raise ValueError("BFDR level must lie in (0, 1)")
    q = 1.0 - ppi
    # Selections only change at the distinct q values, so scanning cutoffs just
    # above each of them (and 1.0 for the full set) covers every feasible rule.
    qs = np.sort(q)
    cum = np.cumsum(qs)
    best = 0.0
    for c in np.unique(np.append(qs, 1.0)):
        m = np.searchsorted(qs, c, side="left")   # count of q < c
        if m and cum[m - 1] / m <= level:
            best = max(best, float(c))
    if best == 0.0:
        return np.zeros(ppi.shape, dtype=np.uint8), 0.0
    return (q < best).astype(np.uint8), best


def bfdr(ppi, threshold: float) -> float:
    q = 1.0 - np.asarray(ppi, dtype=float)
    sel = q < threshold
    return float(q[sel].sum() / sel.sum()) if sel.any() else 0.0


def map_estimates(trace: ChainTrace):
    """``(gamma, z)`` of the recorded sample with the largest joint score; earliest wins ties."""
    _require_samples(trace)
    if trace.scores is None or trace.scores.shape[0] != trace.n_samples:
        raise ValueError("trace lacks per-sample scores")
    total = trace.map_scores
    if np.any(np.isnan(total)):
        raise ValueError("trace holds missing (NaN) scores")
    u = int(np.argmax(total))
    return trace.gamma_samples[u].astype(np.uint8), relabel_contiguous(trace.z_samples[u])


def _indicator(z_samples: np.ndarray) -> sparse.csr_matrix:
    """Stack the one-hot allocation matrices of all samples side by side (n x sum K_u)."""
    U, n = z_samples.shape
    canon = np.vstack([relabel_contiguous(z) for z in z_samples])
    offsets = np.concatenate([[0], np.cumsum(canon.max(axis=1) + 1)])
    cols = (canon + offsets[:-1, None]).T.ravel()
    rows = np.repeat(np.arange(n), U)
    return sparse.csr_matrix((np.ones(n * U, dtype=np.int64), (rows, cols)), shape=(n, offsets[-1]))


def coclustering_counts(z_samples) -> np.ndarray:
    """Integer matrix C with C[i, i'] = number of samples where i and i' share a label."""
    z_samples = np.asarray(z_samples)
    if z_samples.ndim != 2 or z_samples.shape[0] == 0:
        raise ValueError("need a nonempty (samples, n) label array")
    Z = _indicator(z_samples)
    return np.asarray((Z @ Z.T).todense(), dtype=np.int64)


def compute_ppm(trace: ChainTrace) -> np.ndarray:
    _require_samples(trace)
    return coclustering_counts(trace.z_samples) / trace.n_samples


def dahl_estimate(trace: ChainTrace, ppm: np.ndarray | None = None, chunk: int = 256) -> np.ndarray:
    """Recorded partition minimizing sum_{i<i'} (I(z_i = z_i') - PPM_ii')^2.

    Without ``ppm`` the search scores against the integer co-clustering counts,
    which keeps every score an exactly representable integer so that equal
    partitions tie exactly and the earliest recorded one wins.
    """
    _require_samples(trace)
    U, n = trace.z_samples.shape
    canon = np.vstack([relabel_contiguous(z) for z in trace.z_samples])
    uniq, first = np.unique(canon, axis=0, return_index=True)
    if ppm is None:
        target, scale = coclustering_counts(canon).astype(float), float(U)
    else:
        target = np.asarray(ppm, dtype=float)
        if target.shape != (n, n):
            raise ValueError(f"PPM must be {n}x{n}")
        scale = 1.0
    # ||scale*A - T||_F^2 = scale^2 sum_k n_k^2 - 2 scale sum_k 1_k' T 1_k + ||T||^2;
    # the diagonal and the symmetric lower half only add constants and a factor 2.
    scores = np.empty(len(uniq))
    for lo in range(0, len(uniq), chunk):
        block = uniq[lo:lo + chunk]
        ks = block.max(axis=1) + 1
        offsets = np.concatenate([[0], np.cumsum(ks)])
        onehot = np.zeros((n, offsets[-1]))
        onehot[np.repeat(np.arange(n)[None, :], len(block), 0).ravel(), (block + offsets[:-1, None]).ravel()] = 1.0
        inner = np.add.reduceat((onehot * (target @ onehot)).sum(axis=0), offsets[:-1])
        sq = np.add.reduceat((onehot.sum(axis=0)) ** 2, offsets[:-1])
        scores[lo:lo + len(block)] = scale * scale * sq - 2.0 * scale * inner
    best = np.flatnonzero(scores == scores.min())
    return canon[first[best].min()].astype(np.int64)


def dahl_loss(z, ppm) -> float:
    """sum_{i<i'} (I(z_i = z_i') - PPM_ii')^2."""
    z = np.asarray(z)
    A = (z[:, None] == z[None, :]).astype(float)
    diff = np.triu(A - np.asarray(ppm, dtype=float), k=1)
    return float((diff * diff).sum())


def cluster_means(spot_values: np.ndarray, z_hat) -> np.ndarray:
    """Average spot-level posterior means within each estimated domain."""
    z_hat = np.asarray(z_hat, dtype=np.int64)
    K = int(z_hat.max()) + 1
    sums = np.zeros((K, spot_values.shape[1]))
    np.add.at(sums, z_hat, spot_values)
    return sums / np.bincount(z_hat, minlength=K)[:, None]


def merge_domains(mu_hat, gamma_hat, z_hat, k_target: int, method: str = "average") -> np.ndarray:
    """Agglomerate estimated domains on the Euclidean distance of their DG mean profiles.

    Returns spot labels with exactly ``k_target`` distinct values, 0-based and
    numbered by first appearance.
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    gamma_hat = np.asarray(gamma_hat).astype(bool)
    z_hat = np.asarray(z_hat, dtype=np.int64)
    K = mu_hat.shape[0]
    if method not in LINKAGES:
        raise ValueError(f"unknown linkage {method!r}; choose from {LINKAGES}")
    if z_hat.max() + 1 != K:
        raise ValueError(f"z_hat uses {z_hat.max() + 1} labels but mu_hat has {K} rows")
    if not 1 <= k_target <= K:
        raise ValueError(f"k_target must lie in 1..{K}, got {k_target}")
    if not gamma_hat.any():
        raise ValueError("no DGs selected; domain distances are undefined")
    if k_target == K:
        return relabel_contiguous(z_hat)
    if K == 1:
        return np.zeros_like(z_hat)
    tree = linkage(mu_hat[:, gamma_hat], method=method, metric="euclidean")
    groups = cut_tree(tree, n_clusters=k_target).ravel()
    return relabel_contiguous(groups[z_hat])


def summarize(trace: ChainTrace, mode: str = "median", level: float = 0.05) -> PosteriorSummary:
    _require_samples(trace)
    ppi = compute_ppi(trace)
    gamma_hat, threshold = select_dgs(ppi, mode, level)
    gamma_map, z_map = map_estimates(trace)
    ppm = compute_ppm(trace)
    z_ppm = dahl_estimate(trace)
    return PosteriorSummary(
        ppi=ppi, gamma_hat=gamma_hat, gamma_threshold=threshold,
        gamma_map=gamma_map, z_map=z_map, z_ppm=z_ppm, ppm=ppm,
        mu_hat=cluster_means(trace.mu_spot_mean(), z_ppm),
        mu0_hat=trace.mu0_mean(), r_hat=trace.r_mean(),
    )
