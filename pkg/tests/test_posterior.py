import itertools

import numpy as np
import pytest

from bnpspace.mfm import relabel_contiguous
from bnpspace.posterior import (bfdr, coclustering_counts, compute_ppi, compute_ppm, dahl_estimate, dahl_loss,
                                map_estimates, merge_domains, select_dgs, summarize)
from bnpspace.sampler import ChainTrace
from oracles import naive_agglomerate


def fake_trace(z_samples, gamma_samples=None, scores=None, p=2, mu_spot=None):
    z_samples = np.asarray(z_samples, dtype=np.int32)
    U, n = z_samples.shape
    if gamma_samples is None:
        gamma_samples = np.ones((U, p), dtype=np.uint8)
    gamma_samples = np.asarray(gamma_samples, dtype=np.uint8)
    p = gamma_samples.shape[1]
    if scores is None:
        scores = np.zeros((U, 3))
    mu_spot = np.ones((n, p)) if mu_spot is None else np.asarray(mu_spot, float)
    return ChainTrace(z_samples=z_samples, gamma_samples=gamma_samples, scores=np.asarray(scores, float),
                      loglik=np.zeros(U), k_trace=np.ones(U, dtype=np.int64), gamma_accepts=np.zeros(U),
                      mu_spot_sum=mu_spot * U, mu0_sum=np.ones(p) * U, r_sum=np.zeros((n, p)),
                      recorded_iterations=np.arange(U))


# --- PPI and DG selection --------------------------------------------------

def test_ppi_examples():
    t = fake_trace(np.zeros((4, 3)), gamma_samples=[[1, 0, 1], [0, 0, 1], [1, 0, 1], [0, 0, 1]])
    np.testing.assert_array_equal(compute_ppi(t), [0.5, 0.0, 1.0])


def test_empty_trace_rejected():
    t = fake_trace(np.zeros((0, 3)), gamma_samples=np.zeros((0, 2)))
    with pytest.raises(ValueError, match="no recorded samples"):
        compute_ppi(t)


def test_select_median_examples():
    g, c = select_dgs([0.9, 0.4])
    np.testing.assert_array_equal(g, [1, 0])
    assert c == 0.5
    assert select_dgs([0.5])[0][0] == 1


def test_select_bfdr_example():
    g, c = select_dgs([0.99, 0.97, 0.6, 0.2], "bfdr", 0.05)
    np.testing.assert_array_equal(g, [1, 1, 0, 0])
    assert bfdr([0.99, 0.97, 0.6, 0.2], c) == pytest.approx(0.02)


def test_select_bfdr_empty_when_infeasible():
    g, c = select_dgs([0.3, 0.2], "bfdr", 0.05)
    assert not g.any() and c == 0.0


def test_select_rejects_bad_input():
    with pytest.raises(ValueError):
        select_dgs([1.2])
    with pytest.raises(ValueError):
        select_dgs([0.5], "bfdr", 0.0)
    with pytest.raises(ValueError, match="mode"):
        select_dgs([0.5], "max")


def _oracle_bfdr_selection(ppi, level):
    """Among all subsets of the form {q < c}, the largest with BFDR <= level."""
    q = 1.0 - np.asarray(ppi)
    best = np.zeros(len(q), dtype=np.uint8)
    for mask in itertools.product((0, 1), repeat=len(q)):
        m = np.array(mask, dtype=bool)
        if not m.any():
            continue
        # only threshold-shaped subsets are reachable by a cutoff rule
        if m.any() and (~m).any() and q[m].max() >= q[~m].min():
            continue
        if q[m].mean() <= level and m.sum() > best.sum():
            best = m.astype(np.uint8)
    return best


def test_select_bfdr_matches_exhaustive(rng):
    for _ in range(200):
        size = int(rng.integers(1, 8))
        ppi = np.round(rng.beta(0.4, 0.4, size=size), 3)
        level = float(rng.choice([0.01, 0.05, 0.1, 0.3]))
        got, c = select_dgs(ppi, "bfdr", level)
        np.testing.assert_array_equal(got, _oracle_bfdr_selection(ppi, level))
        if got.any():
            assert bfdr(ppi, c) <= level + 1e-12


def test_bfdr_selection_contains_median_when_feasible(rng):
    for _ in range(200):
        ppi = rng.uniform(0, 1, size=12)
        ppi = ppi[np.abs(ppi - 0.5) > 1e-9]
        level = 0.2
        med, _ = select_dgs(ppi)
        if not med.any() or bfdr(ppi, 0.5) > level:
            continue
        sel, c = select_dgs(ppi, "bfdr", level)
        assert c >= 0.5
        assert np.all(sel >= med)
        np.testing.assert_array_equal((1 - ppi < c).astype(np.uint8), sel)


# --- MAP ---------------------------------------------------------------------

def test_map_tie_goes_to_earliest():
    z = [[0, 0, 1], [0, 1, 1], [1, 1, 0]]
    scores = np.zeros((3, 3))
    scores[:, 0] = [-10, -5, -5]
    t = fake_trace(z, gamma_samples=[[0, 0], [1, 0], [0, 1]], scores=scores)
    g, zm = map_estimates(t)
    np.testing.assert_array_equal(g, [1, 0])
    np.testing.assert_array_equal(zm, [0, 1, 1])


def test_map_rejects_nan_scores():
    scores = np.zeros((2, 3))
    scores[1, 2] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        map_estimates(fake_trace([[0, 0], [0, 1]], scores=scores))


# --- PPM and Dahl -------------------------------------------------------------

def naive_ppm(z_samples):
    z = np.asarray(z_samples)
    U, n = z.shape
    out = np.zeros((n, n))
    for u in range(U):
        for i in range(n):
            for j in range(n):
                out[i, j] += z[u, i] == z[u, j]
    return out / U


def test_ppm_examples_and_oracle(rng):
    t = fake_trace([[0, 0, 1], [0, 1, 1]])
    np.testing.assert_array_equal(compute_ppm(t), [[1, 0.5, 0], [0.5, 1, 0.5], [0, 0.5, 1]])
    zs = rng.integers(0, 4, size=(30, 9))
    ppm = compute_ppm(fake_trace(zs))
    np.testing.assert_allclose(ppm, naive_ppm(zs), rtol=0, atol=1e-15)
    assert np.all(np.diag(ppm) == 1.0) and np.array_equal(ppm, ppm.T)
    assert coclustering_counts(zs).dtype.kind == "i"


def test_dahl_matches_brute_force(rng):
    for _ in range(20):
        zs = rng.integers(0, 3, size=(int(rng.integers(2, 25)), 7))
        t = fake_trace(zs)
        ppm = naive_ppm(zs)
        losses = [dahl_loss(z, ppm) for z in zs]
        m = min(losses)
        expect = next(u for u, v in enumerate(losses) if abs(v - m) < 1e-9)
        got = dahl_estimate(t)
        np.testing.assert_array_equal(got, relabel_contiguous(zs[expect]))
        np.testing.assert_array_equal(dahl_estimate(t, ppm=compute_ppm(t)), got)


def test_dahl_recovers_mode_of_corrupted_trace(rng):
    mode = np.repeat([0, 1, 2], 5)
    zs = []
    for _ in range(60):
        z = mode.copy()
        flip = rng.random(15) < 0.2
        z[flip] = rng.integers(0, 4, size=flip.sum())
        zs.append(z)
    zs.append((mode + 1) % 3)          # the exact mode, under permuted labels
    got = dahl_estimate(fake_trace(zs))
    np.testing.assert_array_equal(got, relabel_contiguous(mode))


def test_dahl_invariant_to_label_permutation(rng):
    zs = rng.integers(0, 3, size=(20, 8))
    perm = np.array([2, 0, 1])
    a = dahl_estimate(fake_trace(zs))
    b = dahl_estimate(fake_trace(perm[zs]))
    np.testing.assert_array_equal(a, b)


def test_dahl_identical_samples():
    z = [[0, 1, 1, 2]] * 5
    np.testing.assert_array_equal(dahl_estimate(fake_trace(z)), [0, 1, 1, 2])


# --- domain merging -----------------------------------------------------------

def test_merge_identity_and_small_example():
    z = np.array([0, 1, 2, 2, 1, 0])
    mu = np.array([[0.0], [0.1], [5.0]])
    np.testing.assert_array_equal(merge_domains(mu, [1], z, 3), relabel_contiguous(z))
    np.testing.assert_array_equal(merge_domains(mu, [1], z, 2), [0, 0, 1, 1, 0, 0])
    np.testing.assert_array_equal(merge_domains(mu, [1], z, 1), np.zeros(6))


def test_merge_errors():
    z = np.array([0, 1, 2])
    mu = np.eye(3)
    with pytest.raises(ValueError, match="no DGs"):
        merge_domains(mu, [0, 0, 0], z, 2)
    with pytest.raises(ValueError, match="k_target"):
        merge_domains(mu, [1, 1, 1], z, 4)
    with pytest.raises(ValueError, match="k_target"):
        merge_domains(mu, [1, 1, 1], z, 0)
    with pytest.raises(ValueError, match="linkage"):
        merge_domains(mu, [1, 1, 1], z, 2, method="ward")


def _same_partition(a, b):
    return np.array_equal(relabel_contiguous(a), relabel_contiguous(b))


@pytest.mark.parametrize("method", ["average", "single", "complete"])
def test_merge_matches_naive_agglomeration(rng, method):
    for _ in range(30):
        K = int(rng.integers(2, 8))
        mu = rng.gamma(2.0, 2.0, size=(K, 5))
        gamma = np.array([1, 0, 1, 1, 0])
        z = rng.permutation(np.arange(K).repeat(3))
        z = relabel_contiguous(z)
        mu = mu[np.argsort(np.unique(z, return_index=True)[1])]
        for k in range(1, K + 1):
            got = merge_domains(mu, gamma, z, k, method)
            ref_groups = naive_agglomerate(mu[:, gamma.astype(bool)], k, method)
            assert _same_partition(got, ref_groups[z])
            assert len(np.unique(got)) == k


def test_merge_is_nested(rng):
    K = 7
    mu = rng.gamma(2.0, 2.0, size=(K, 4))
    z = np.arange(K).repeat(2)
    prev = merge_domains(mu, [1, 1, 1, 1], z, K)
    for k in range(K - 1, 0, -1):
        cur = merge_domains(mu, [1, 1, 1, 1], z, k)
        # every finer group sits inside exactly one coarser group
        for g in np.unique(prev):
            assert len(np.unique(cur[prev == g])) == 1
        prev = cur


def test_merge_invariant_to_domain_relabelling(rng):
    K = 5
    mu = rng.gamma(2.0, 2.0, size=(K, 3))
    z = np.arange(K).repeat(2)
    perm = rng.permutation(K)
    inv = np.argsort(perm)
    a = merge_domains(mu, [1, 1, 1], z, 3)
    b = merge_domains(mu[inv], [1, 1, 1], perm[z], 3)
    assert _same_partition(a, b)


# --- summary -------------------------------------------------------------------

def test_summarize_assembles_estimates():
    zs = [[0, 0, 1, 1]] * 3 + [[0, 1, 1, 1]]
    mu_spot = np.array([[1.0, 2.0], [1.0, 2.0], [5.0, 2.0], [7.0, 2.0]])
    t = fake_trace(zs, gamma_samples=[[1, 0]] * 4, mu_spot=mu_spot)
    s = summarize(t)
    np.testing.assert_array_equal(s.z_ppm, [0, 0, 1, 1])
    assert s.k_hat == 2
    np.testing.assert_allclose(s.mu_hat, [[1.0, 2.0], [6.0, 2.0]])
    np.testing.assert_array_equal(s.gamma_hat, [1, 0])
    assert s.r_hat.shape == (4, 2)
