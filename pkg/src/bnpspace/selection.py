"""Choosing the spatial coupling d by a penalized BIC over a grid."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln

from .data import CountMatrix, SizeFactors, SpatialGraph
from .mfm import MfmConfig
from .posterior import PosteriorSummary, summarize
from .sampler import Hyperparams, McmcConfig, run_chain

logger = logging.getLogger(__name__)

DEFAULT_GRID = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)


@dataclass(frozen=True)
class PbicRecord:
    d: float
    pbic: float
    k_hat: int
    p_gamma_hat: int
    loglik_at_estimates: float
    error: str | None = None   # set when the fit at this d failed; pbic is then NaN

    def __post_init__(self):
        if self.error is None and not math.isfinite(self.pbic):
            raise ValueError(f"non-finite pBIC at d={self.d}")

    @property
    def failed(self) -> bool:
        return self.error is not None


def pbic_penalty(n: int, p: int, k_hat: int, p_gamma_hat: int) -> float:
    return math.log(n) * (p_gamma_hat * k_hat + p - p_gamma_hat)


def pbic(counts: CountMatrix, sf: SizeFactors, summary: PosteriorSummary, d: float) -> PbicRecord:
    """-2 log L(Y | point estimates) + log(n) (p_gamma K + p - p_gamma).

    R and gamma are thresholded at posterior mean > 0.5; the likelihood runs
    over entries whose estimated extra-zero indicator is 0.
    """
    if summary.r_hat is None:
        raise ValueError("pBIC needs the posterior mean of R; run the chain with record_r=True")
    y = counts.values
    n, p = y.shape
    z = np.asarray(summary.z_ppm, dtype=np.int64)
    if summary.mu_hat.shape != (summary.k_hat, p) or len(z) != n or summary.r_hat.shape != (n, p):
        raise ValueError("point estimates do not match the data dimensions")
    gamma = summary.ppi > 0.5
    keep = summary.r_hat <= 0.5
    mean = sf.s[:, None] * np.where(gamma[None, :], summary.mu_hat[z], summary.mu0_hat[None, :])
    terms = y * np.log(mean) - mean - gammaln(y + 1.0)
    loglik = float(terms[keep].sum())
    k_hat, p_gamma = summary.k_hat, int(gamma.sum())
    return PbicRecord(float(d), -2.0 * loglik + pbic_penalty(n, p, k_hat, p_gamma), k_hat, p_gamma, loglik)


def _fit_one(args):
    counts, sf, graph, hp, cfg, mcmc = args
    trace = run_chain(counts, sf, graph, hp, cfg, mcmc)
    return pbic(counts, sf, summarize(trace), cfg.d)


def select_d(counts: CountMatrix, sf: SizeFactors, graph: SpatialGraph, grid=DEFAULT_GRID,
             hp: Hyperparams = Hyperparams(), cfg_template: MfmConfig = MfmConfig(),
             mcmc: McmcConfig = McmcConfig(), threads: int = 1):
    """Fit once per grid value and return ``(best_d, records)``.

    Each grid point gets its own seed spawned from ``mcmc.seed``, so results do
    not depend on ``threads``. A failed fit is kept in ``records`` with its
    error message and skipped by the selection.
    """
    grid = [float(d) for d in grid]
    if not grid:
        raise ValueError("d grid is empty")
    if any(not d >= 0 for d in grid):
        raise ValueError("d grid values must be nonnegative")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(mcmc.seed).spawn(len(grid))]
    jobs = [(counts, sf, graph, hp, replace(cfg_template, d=d), replace(mcmc, seed=seed))
            for d, seed in zip(grid, seeds)]

    records = []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_fit_one, job) for job in jobs]
            outcomes = []
            for fut in futures:
                try:
                    outcomes.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - any fit failure is recorded, not fatal
                    outcomes.append(exc)
    else:
        outcomes = []
        for job in jobs:
            try:
                outcomes.append(_fit_one(job))
            except Exception as exc:  # noqa: BLE001
                outcomes.append(exc)

    for d, out in zip(grid, outcomes):
        if isinstance(out, Exception):
            logger.warning("fit at d=%g failed: %s", d, out)
            records.append(PbicRecord(d, math.nan, 0, 0, math.nan, error=f"{type(out).__name__}: {out}"))
        else:
            records.append(out)
    ok = [r for r in records if not r.failed]
    if not ok:
        raise RuntimeError("every fit on the d grid failed: " + "; ".join(r.error for r in records))
    best = min(ok, key=lambda r: r.pbic)  # earliest grid value wins ties
    return best.d, records
