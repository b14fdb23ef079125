"""Synthetic spatial count data: Potts label fields and zero-inflated Poisson counts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .data import CountMatrix

PATTERNS = {"I": 3, "II": 5, "III": 7}
PAPER_K = (3, 5, 7)


@dataclass(frozen=True)
class SimScenario:
    height: int = 40
    width: int = 40
    K: int = 3
    potts_beta: float = 1.0
    sweeps: int = 500
    p: int = 1000
    p_gamma: int = 20
    pi: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.K not in PAPER_K:
            raise ValueError(f"K must be one of {PAPER_K} for the mean schemes, got {self.K}")
        if self.p_gamma % 2:
            raise ValueError("p_gamma must be even")
        if not 0 < self.p_gamma <= self.p:
            raise ValueError("need 0 < p_gamma <= p")
        if not 0 <= self.pi < 1:
            raise ValueError("pi must lie in [0, 1)")
        if self.height < 1 or self.width < 1 or self.height * self.width < 2:
            raise ValueError("lattice needs at least two sites")

    @classmethod
    def pattern(cls, name: str, **overrides) -> "SimScenario":
        if name not in PATTERNS:
            raise ValueError(f"unknown pattern {name!r}; lattice patterns are {sorted(PATTERNS)}")
        return cls(K=PATTERNS[name], **overrides)


@dataclass
class SimDataset:
    counts: CountMatrix
    coords: np.ndarray
    z_true: np.ndarray        # 0-based
    gamma_true: np.ndarray
    mu_star_true: np.ndarray  # (K, p); NaN outside the DG columns
    mu0_true: np.ndarray
    s_true: np.ndarray
    r_true: np.ndarray


@njit(cache=True)
def _potts_sweeps(labels, height, width, K, beta, sweeps, rng):
    counts = np.zeros(K)
    log_w = np.empty(K)
    for _ in range(sweeps):
        for row in range(height):
            for col in range(width):
                for k in range(K):
                    counts[k] = 0.0
                if row > 0:
                    counts[labels[row - 1, col]] += 1.0
                if row < height - 1:
                    counts[labels[row + 1, col]] += 1.0
                if col > 0:
                    counts[labels[row, col - 1]] += 1.0
                if col < width - 1:
                    counts[labels[row, col + 1]] += 1.0
                mx = -np.inf
                for k in range(K):
                    log_w[k] = beta * counts[k]
                    if log_w[k] > mx:
                        mx = log_w[k]
                total = 0.0
                for k in range(K):
                    log_w[k] = math.exp(log_w[k] - mx)
                    total += log_w[k]
                u = rng.random() * total
                acc = 0.0
                pick = K - 1
                for k in range(K):
                    acc += log_w[k]
                    if u < acc:
                        pick = k
                        break
                labels[row, col] = pick


def sample_potts(height: int, width: int, K: int, beta: float, sweeps: int, rng) -> np.ndarray:
    """Raster-scan single-site Gibbs on the 4-neighbor lattice from a uniform start.

    Returns row-major 0-based labels of length height * width.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be at least 1")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    labels = rng.integers(0, K, size=(height, width))
    _potts_sweeps(labels, height, width, K, float(beta), sweeps, rng)
    return labels.ravel()


def lattice_coords(height: int, width: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(height * width), width)
    return np.column_stack([cols, rows]).astype(float)


def generate_mu(K: int, p: int, p_gamma: int, rng):
    """Domain means on the first p_gamma genes following the offset schemes for K = 3, 5, 7."""
    if K not in PAPER_K:
        raise ValueError(f"K must be one of {PAPER_K}, got {K}")
    if p_gamma % 2:
        raise ValueError("p_gamma must be even to split the DG set in halves")
    if not 0 < p_gamma <= p:
        raise ValueError("need 0 < p_gamma <= p")
    base = rng.gamma(2.0, 1.0, size=p_gamma)
    offsets = np.zeros((K, p_gamma))
    offsets[1] = 3.0
    offsets[2] = 6.0
    if K >= 5:
        s4 = rng.choice(p_gamma, size=p_gamma // 2, replace=False)
        in_s4 = np.zeros(p_gamma, dtype=bool)
        in_s4[s4] = True
        offsets[3, in_s4] = 3.0
        offsets[4, ~in_s4] = 3.0
    if K == 7:
        s7 = rng.choice(p_gamma, size=p_gamma // 2, replace=False)
        offsets[5] = 9.0
        offsets[6, s7] = 9.0
    mu_star = np.full((K, p), np.nan)
    mu_star[:, :p_gamma] = base + offsets
    mu0 = rng.gamma(2.0, 1.0, size=p)
    gamma_true = np.zeros(p, dtype=np.uint8)
    gamma_true[:p_gamma] = 1
    return mu_star, mu0, gamma_true


def generate_counts(z_true, mu_star, mu0, gamma_true, pi, rng, coords=None) -> SimDataset:
    z_true = np.asarray(z_true, dtype=np.int64)
    gamma_true = np.asarray(gamma_true, dtype=np.uint8)
    n, p = len(z_true), len(mu0)
    s = rng.uniform(0.5, 1.5, size=n)
    means = np.where(gamma_true[None, :] == 1, mu_star[z_true], mu0[None, :])
    means = np.nan_to_num(means, nan=0.0)
    r = (rng.random((n, p)) < pi).astype(np.uint8)
    y = rng.poisson(s[:, None] * means)
    y[r == 1] = 0
    counts = CountMatrix(y, [f"spot{i + 1}" for i in range(n)], [f"gene{j + 1}" for j in range(p)])
    if coords is None:
        coords = np.full((n, 2), np.nan)
    return SimDataset(counts, np.asarray(coords, dtype=float), z_true, gamma_true,
                      mu_star, np.asarray(mu0, dtype=float), s, r)


def simulate(scenario: SimScenario) -> SimDataset:
    rng = np.random.default_rng(scenario.seed)
    z = sample_potts(scenario.height, scenario.width, scenario.K, scenario.potts_beta, scenario.sweeps, rng)
    mu_star, mu0, gamma_true = generate_mu(scenario.K, scenario.p, scenario.p_gamma, rng)
    return generate_counts(z, mu_star, mu0, gamma_true, scenario.pi, rng,
                           coords=lattice_coords(scenario.height, scenario.width))


def simulate_on_layout(z_true, coords, K, p, p_gamma, pi, seed) -> SimDataset:
    """Counts on an external spatial layout (for example a real tissue's annotated domains)."""
    rng = np.random.default_rng(seed)
    mu_star, mu0, gamma_true = generate_mu(K, p, p_gamma, rng)
    return generate_counts(z_true, mu_star, mu0, gamma_true, pi, rng, coords=coords)
