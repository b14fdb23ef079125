"""Compiled inner loops for the MRF-MFM sampler.

Everything here works on plain arrays with 0-based cluster labels. Cluster
rows ``0..K-1`` of ``mu_star``/``log_mu_star``/``sizes`` are live; rows at
or beyond ``K`` are scratch. ``log_v[t]`` holds log V_n(t) for
``t = 1..len(log_v) - 1`` (index 0 unused).

Status codes returned by the sweep driver:
    0  finished the requested sweeps
    1  the V_n table is too short for the next spot
    2  the cluster arrays are too small for the next spot
"""

import math

import numpy as np
from numba import njit

OK = 0
NEED_VN = 1
NEED_CAPACITY = 2


@njit(cache=True)
def log_marginal(sum_y, sum_s, a, b):
    """log of the Gamma-Poisson evidence without the sum(y log s - log y!) term."""
    return (a * math.log(b) - math.lgamma(a) + math.lgamma(a + sum_y)
            - (a + sum_y) * math.log(b + sum_s))


@njit(cache=True)
def sample_log_weights(log_w, m, rng):
    mx = -np.inf
    for k in range(m):
        if log_w[k] > mx:
            mx = log_w[k]
    total = 0.0
    for k in range(m):
        total += math.exp(log_w[k] - mx)
    u = rng.random() * total
    acc = 0.0
    for k in range(m):
        acc += math.exp(log_w[k] - mx)
        if u < acc:
            return k
    return m - 1


@njit(cache=True)
def draw_gamma(shape, rate, rng):
    # floor keeps log(mu) finite when a tiny shape underflows the draw
    v = rng.gamma(shape, 1.0 / rate)
    return v if v > 1e-300 else 1e-300


@njit(cache=True)
def cluster_stats(y, s, r, z, K):
    n, p = y.shape
    sum_y = np.zeros((K, p))
    sum_s = np.zeros((K, p))
    for i in range(n):
        k = z[i]
        for j in range(p):
            if r[i, j] == 0:
                sum_y[k, j] += y[i, j]
                sum_s[k, j] += s[i]
    return sum_y, sum_s


@njit(cache=True)
def gene_log_bayes_factors(y, s, r, z, K, a_mu, b_mu):
    """Per gene: log evidence as a DG (per-cluster means) minus as a non-DG (pooled mean)."""
    sum_y, sum_s = cluster_stats(y, s, r, z, K)
    p = y.shape[1]
    out = np.empty(p)
    for j in range(p):
        pooled_y = 0.0
        pooled_s = 0.0
        acc = 0.0
        for k in range(K):
            acc += log_marginal(sum_y[k, j], sum_s[k, j], a_mu, b_mu)
            pooled_y += sum_y[k, j]
            pooled_s += sum_s[k, j]
        out[j] = acc - log_marginal(pooled_y, pooled_s, a_mu, b_mu)
    return out


@njit(cache=True)
def log_gamma_prior(p_gamma, p, a_w, b_w):
    """Beta-binomial log prior on an indicator vector, up to a constant."""
    return math.lgamma(a_w + p_gamma) + math.lgamma(b_w + p - p_gamma)


@njit(cache=True)
def log_gamma_prior_normalized(p_gamma, p, a_w, b_w):
    """log P(gamma) with omega ~ Beta(a_w, b_w) integrated out."""
    return (math.lgamma(a_w + p_gamma) + math.lgamma(b_w + p - p_gamma) - math.lgamma(a_w + b_w + p)
            - math.lgamma(a_w) - math.lgamma(b_w) + math.lgamma(a_w + b_w))


@njit(cache=True)
def _log_add_delete_prob(p_gamma, p, rho):
    if p_gamma == 0 or p_gamma == p:
        return 0.0
    return math.log(rho)


@njit(cache=True)
def gamma_steps(gamma, log_bf, n_steps, rho, a_w, b_w, rng):
    """Metropolis search over DG indicators; returns the accepted move count."""
    p = gamma.shape[0]
    p_gamma = 0
    for j in range(p):
        p_gamma += gamma[j]
    accepted = 0
    for _ in range(n_steps):
        can_swap = 0 < p_gamma < p
        if rng.random() < rho or not can_swap:
            j = rng.integers(0, p)
            if gamma[j] == 1:
                new_pg = p_gamma - 1
                log_ratio = -log_bf[j]
            else:
                new_pg = p_gamma + 1
                log_ratio = log_bf[j]
            log_ratio += log_gamma_prior(new_pg, p, a_w, b_w) - log_gamma_prior(p_gamma, p, a_w, b_w)
            # Add/Delete is proposed with prob rho, or 1 when a swap is impossible
            log_ratio += _log_add_delete_prob(new_pg, p, rho) - _log_add_delete_prob(p_gamma, p, rho)
            if math.log(rng.random()) < log_ratio:
                gamma[j] = 1 - gamma[j]
                p_gamma = new_pg
                accepted += 1
        else:
            a = rng.integers(0, p_gamma)
            b = rng.integers(0, p - p_gamma)
            j_in = -1
            j_out = -1
            ci = 0
            co = 0
            for j in range(p):
                if gamma[j] == 1:
                    if ci == a:
                        j_in = j
                    ci += 1
                else:
                    if co == b:
                        j_out = j
                    co += 1
            log_ratio = log_bf[j_out] - log_bf[j_in]
            if math.log(rng.random()) < log_ratio:
                gamma[j_in] = 0
                gamma[j_out] = 1
                accepted += 1
    return accepted


@njit(cache=True)
def mu_update(y, s, r, z, K, gamma, mu_star, log_mu_star, mu0, log_mu0, a_mu, b_mu, rng):
    """Conjugate Gamma draws for every live cluster row and for mu0.

    Columns that are inactive in the current gamma are refreshed from the
    same conditionals so that a later indicator flip never reads stale values.
    """
    sum_y, sum_s = cluster_stats(y, s, r, z, K)
    p = y.shape[1]
    for j in range(p):
        pooled_y = 0.0
        pooled_s = 0.0
        for k in range(K):
            v = draw_gamma(a_mu + sum_y[k, j], b_mu + sum_s[k, j], rng)
            mu_star[k, j] = v
            log_mu_star[k, j] = math.log(v)
            pooled_y += sum_y[k, j]
            pooled_s += sum_s[k, j]
        v = draw_gamma(a_mu + pooled_y, b_mu + pooled_s, rng)
        mu0[j] = v
        log_mu0[j] = math.log(v)


@njit(cache=True)
def r_update(y, s, z, gamma, mu_star, mu0, pi, r, rng):
    n, p = y.shape
    for i in range(n):
        k = z[i]
        for j in range(p):
            if y[i, j] > 0:
                r[i, j] = 0
                continue
            mu = mu_star[k, j] if gamma[j] == 1 else mu0[j]
            keep = (1.0 - pi[i]) * math.exp(-s[i] * mu)
            prob = pi[i] / (pi[i] + keep) if pi[i] > 0.0 else 0.0
            r[i, j] = 1 if rng.random() < prob else 0


@njit(cache=True)
def pi_update(r, pi, a_pi, b_pi, rng):
    n, p = r.shape
    for i in range(n):
        a = 0
        for j in range(p):
            a += r[i, j]
        pi[i] = rng.beta(a_pi + a, b_pi + p - a)


@njit(cache=True)
def data_loglik(y, s, r, z, gamma, log_mu_star, mu_star, log_mu0, mu0, const):
    """Sum of log P(y_ij | r_ij, gamma_j, z_i, mu) given precomputed constant terms.

    ``const`` must equal sum_ij [y_ij log s_i - log y_ij!]; entries with
    r_ij = 1 have y_ij = 0 and contribute nothing to either part.
    """
    n, p = y.shape
    total = const
    for i in range(n):
        k = z[i]
        for j in range(p):
            if r[i, j] == 1:
                continue
            if gamma[j] == 1:
                total += y[i, j] * log_mu_star[k, j] - s[i] * mu_star[k, j]
            else:
                total += y[i, j] * log_mu0[j] - s[i] * mu0[j]
    return total


@njit(cache=True)
def partition_log_prior_labels(z, K, indptr, indices, log_v, alpha0, d):
    n = z.shape[0]
    sizes = np.zeros(K, dtype=np.int64)
    for i in range(n):
        sizes[z[i]] += 1
    total = log_v[K]
    lg0 = math.lgamma(alpha0)
    for k in range(K):
        total += math.lgamma(alpha0 + sizes[k]) - lg0
    if d != 0.0:
        edges = 0
        for i in range(n):
            for e in range(indptr[i], indptr[i + 1]):
                i2 = indices[e]
                if i2 > i and z[i2] == z[i]:
                    edges += 1
        total += d * edges
    return total


@njit(cache=True)
def remove_spot(i, z, sizes, K, mu_star, log_mu_star):
    """Detach spot i; an emptied cluster takes the last live label. Returns new K."""
    c = z[i]
    z[i] = -1
    sizes[c] -= 1
    if sizes[c] == 0:
        last = K - 1
        if c != last:
            for ii in range(z.shape[0]):
                if z[ii] == last:
                    z[ii] = c
            sizes[c] = sizes[last]
            mu_star[c, :] = mu_star[last, :]
            log_mu_star[c, :] = log_mu_star[last, :]
        sizes[last] = 0
        K -= 1
    return K


@njit(cache=True)
def spot_log_weights(i, y, s, r, z, sizes, K, gamma, log_mu_star, mu_star,
                     indptr, indices, log_v, alpha0, d, a_mu, b_mu, nb, out):
    """Unnormalized log conditional of z_i over the K live clusters and a new one.

    Spot i must already be detached (z[i] == -1). Terms shared by every
    choice (y log s - log y!) are left out. Writes ``out[:K + 1]``.
    """
    p = y.shape[1]
    for k in range(K):
        nb[k] = 0
    for e in range(indptr[i], indptr[i + 1]):
        k = z[indices[e]]
        if k >= 0:
            nb[k] += 1
    for k in range(K):
        out[k] = math.log(sizes[k] + alpha0) + d * nb[k]
    out[K] = math.log(alpha0) + log_v[K + 1] - log_v[K]
    si = s[i]
    for j in range(p):
        if gamma[j] == 0 or r[i, j] == 1:
            continue
        yij = y[i, j]
        for k in range(K):
            out[k] += yij * log_mu_star[k, j] - si * mu_star[k, j]
        out[K] += log_marginal(yij, si, a_mu, b_mu)


@njit(cache=True)
def z_update(start, y, s, r, z, sizes, K, gamma, mu_star, log_mu_star,
             indptr, indices, log_v, alpha0, d, a_mu, b_mu, rng, nb, w):
    """Sequential collapsed update of z from spot ``start`` onwards.

    Returns (next_spot, K, status); next_spot == n when the pass completed.
    """
    n, p = y.shape
    t_max = log_v.shape[0] - 1
    cap = mu_star.shape[0]
    for i in range(start, n):
        # after detaching spot i at most min(K, n - 1) clusters remain, and a
        # birth needs V_n at one more block plus one more row of means
        need = min(K + 1, n)
        if need > t_max:
            return i, K, NEED_VN
        if need > cap:
            return i, K, NEED_CAPACITY
        K = remove_spot(i, z, sizes, K, mu_star, log_mu_star)
        spot_log_weights(i, y, s, r, z, sizes, K, gamma, log_mu_star, mu_star,
                         indptr, indices, log_v, alpha0, d, a_mu, b_mu, nb, w)
        k = sample_log_weights(w, K + 1, rng)
        if k == K:
            si = s[i]
            for j in range(p):
                if r[i, j] == 0:
                    v = draw_gamma(a_mu + y[i, j], b_mu + si, rng)
                else:
                    v = draw_gamma(a_mu, b_mu, rng)
                mu_star[K, j] = v
                log_mu_star[K, j] = math.log(v)
            sizes[K] = 0
            K += 1
        z[i] = k
        sizes[k] += 1
    return n, K, OK


@njit(cache=True)
def run_sweeps(
    y, s, r, z, sizes, K, gamma, mu_star, log_mu_star, mu0, log_mu0, pi,
    indptr, indices, log_v, alpha0, d,
    a_mu, b_mu, a_pi, b_pi, a_w, b_w, rho, n_gamma_steps, loglik_const,
    it_start, it_stop, resume_spot, burn_in, thin,
    loglik_trace, k_trace, accept_trace,
    z_samples, gamma_samples, score_samples, rec_start,
    mu_spot_sum, mu0_sum, r_sum, record_r,
    rng,
):
    """Run sweeps ``it_start..it_stop-1``; may stop early for table/capacity growth.

    A sweep is: gamma Metropolis search (means collapsed), conjugate refresh
    of all means, sequential z update, means, extra-zero indicators,
    extra-zero proportions, then bookkeeping. ``resume_spot >= 0`` restarts
    the first sweep inside its z pass.

    Returns (status, iteration, next_spot, K, n_recorded).
    """
    n, p = y.shape
    nb = np.zeros(mu_star.shape[0] + 1, dtype=np.int64)
    w = np.empty(mu_star.shape[0] + 1)
    rec = rec_start
    for it in range(it_start, it_stop):
        spot = 0
        if it == it_start and resume_spot >= 0:
            spot = resume_spot
        else:
            log_bf = gene_log_bayes_factors(y, s, r, z, K, a_mu, b_mu)
            accept_trace[it] = gamma_steps(gamma, log_bf, n_gamma_steps, rho, a_w, b_w, rng)
            mu_update(y, s, r, z, K, gamma, mu_star, log_mu_star, mu0, log_mu0, a_mu, b_mu, rng)
        spot, K, status = z_update(spot, y, s, r, z, sizes, K, gamma, mu_star, log_mu_star,
                                   indptr, indices, log_v, alpha0, d, a_mu, b_mu, rng, nb, w)
        if status != OK:
            return status, it, spot, K, rec
        mu_update(y, s, r, z, K, gamma, mu_star, log_mu_star, mu0, log_mu0, a_mu, b_mu, rng)
        r_update(y, s, z, gamma, mu_star, mu0, pi, r, rng)
        pi_update(r, pi, a_pi, b_pi, rng)

        ll = data_loglik(y, s, r, z, gamma, log_mu_star, mu_star, log_mu0, mu0, loglik_const)
        loglik_trace[it] = ll
        k_trace[it] = K
        if it >= burn_in and (it - burn_in) % thin == 0:
            p_gamma = 0
            for j in range(p):
                gamma_samples[rec, j] = gamma[j]
                p_gamma += gamma[j]
            for i in range(n):
                z_samples[rec, i] = z[i]
                k = z[i]
                for j in range(p):
                    mu_spot_sum[i, j] += mu_star[k, j]
                if record_r:
                    for j in range(p):
                        r_sum[i, j] += r[i, j]
            for j in range(p):
                mu0_sum[j] += mu0[j]
            score_samples[rec, 0] = ll
            score_samples[rec, 1] = log_gamma_prior_normalized(p_gamma, p, a_w, b_w)
            score_samples[rec, 2] = partition_log_prior_labels(z, K, indptr, indices, log_v, alpha0, d)
            rec += 1
    return OK, it_stop, 0, K, rec


@njit(cache=True)
def prior_sweeps(z, sizes, K, indptr, indices, log_v, alpha0, d, out, rng):
    """Urn-only Gibbs sweeps (no data term); row u of ``out`` gets z after sweep u."""
    n = z.shape[0]
    y = np.zeros((n, 1), dtype=np.int64)
    r = np.zeros((n, 1), dtype=np.uint8)
    gamma = np.zeros(1, dtype=np.uint8)
    s = np.ones(n)
    mu = np.ones((n + 1, 1))
    log_mu = np.zeros((n + 1, 1))
    nb = np.zeros(n + 2, dtype=np.int64)
    w = np.empty(n + 2)
    for u in range(out.shape[0]):
        _, K, status = z_update(0, y, s, r, z, sizes, K, gamma, mu, log_mu,
                                indptr, indices, log_v, alpha0, d, 1.0, 1.0, rng, nb, w)
        if status != OK:
            raise ValueError("V_n table must cover t = 1..n for prior sampling")
        for i in range(n):
            out[u, i] = z[i]
    return K
