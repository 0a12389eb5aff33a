"""MCMC for the hidden Markov tensor partition model.

One iteration updates, in order: the partition labels at every (location,
predictor) pair by collapsed Metropolis-Hastings; the core coefficients; the
smoothing variance and its auxiliary scale; the initial distributions,
transition rows and concentrations of the label chains; the second-layer
probabilities and their concentration; the partition-size shrinkage; the
random-effect curves and their two scales; and the error variance.
"""
from dataclasses import dataclass, field
import logging
import math
from typing import Optional

import numpy as np
from scipy.special import gammaln

from .collapsed import LOG_2PI, ClusterStats, NeighborSums, gaussian_product, neighbor_sums
from .data import Dataset
from .exceptions import InconsistentStateError, InvalidArgumentError, LFMMError, SamplerError
from .posterior import SampleStore
from .state import (
    CovariateSpace,
    Hyperparameters,
    canonical_membership,
    composite_keys,
    initial_labels,
    log_prior_second_layer,
    log_sum_exp,
    partition_size_log_probs,
    penalty_eigenvalues,
    validate_labels,
)

__all__ = [
    "SamplerConfig",
    "GibbsSampler",
    "run_chain",
    "hamming_ball_size",
    "propose_hamming_ball",
    "sample_log_dirichlet",
    "gibbs_update_dirichlet_row",
    "gibbs_update_sigma_beta",
    "mh_update_log_scale",
    "gibbs_update_random_effects",
    "random_effects_posterior",
    "gibbs_update_sigma_eps",
    "FIXABLE",
]

logger = logging.getLogger(__name__)

FIXABLE = frozenset({
    "partitions", "core", "sigma_beta", "initial_distribution", "transitions", "alpha",
    "second_layer_probs", "alpha_star", "phi", "random_effects", "random_effect_scales",
    "sigma_eps",
})


@dataclass
class SamplerConfig:
    """Settings of one chain.

    ``fixed`` names blocks (see ``FIXABLE``) that keep their initial value;
    ``initial`` overrides starting values by name. ``ignore_likelihood``
    drops the collapsed evidence from partition moves (prior-only checks).
    ``second_layer=None`` enables the second layer whenever ``p > 1``.
    ``warmup`` is the number of opening iterations during which random
    effects and their scales stay at their initial values, so that
    predictor effects are found before subject curves can absorb them.
    ``None`` means a fifth of the burn-in; it may not exceed the burn-in.
    """

    hyperparameters: Hyperparameters = field(default_factory=Hyperparameters)
    hamming_radius: int = 1
    seed: int = 0
    alphabet: Optional[tuple] = None
    init: str = "fused"
    second_layer: Optional[bool] = None
    fixed: frozenset = frozenset()
    initial: dict = field(default_factory=dict)
    ignore_likelihood: bool = False
    progress_every: int = 0
    warmup: Optional[int] = None

    def __post_init__(self):
        if int(self.hamming_radius) != self.hamming_radius or self.hamming_radius < 1:
            raise InvalidArgumentError("hamming_radius must be a positive integer")
        if self.init not in ("separate", "fused"):
            raise InvalidArgumentError(f"unknown initialization {self.init!r}")
        self.fixed = frozenset(self.fixed)
        unknown = self.fixed - FIXABLE
        if unknown:
            raise InvalidArgumentError(f"cannot hold fixed: {sorted(unknown)}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise InvalidArgumentError("seed must be a nonnegative integer")
        if self.warmup is None:
            self.warmup = self.hyperparameters.burn_in // 5
        if int(self.warmup) != self.warmup or not 0 <= self.warmup <= self.hyperparameters.burn_in:
            raise InvalidArgumentError("warmup must be an integer between 0 and burn_in")


def hamming_ball_size(length, radius, alphabet_size):
    r = min(radius, length)
    return sum(math.comb(length, d) * (alphabet_size - 1) ** d for d in range(r + 1))


def propose_hamming_ball(current, radius, alphabet_size, rng):
    """Draw uniformly from the label sequences within Hamming distance ``radius``.

    Labels are 0-based; the current sequence belongs to the ball.
    """
    current = np.asarray(current, dtype=np.int64)
    if radius < 0:
        raise InvalidArgumentError("radius must be nonnegative")
    n, a = current.size, int(alphabet_size)
    r = min(int(radius), n)
    out = current.copy()
    if r == 0 or a < 2:
        return out
    if r == 1:
        idx = int(rng.integers(1 + n * (a - 1)))
        if idx:
            pos, shift = divmod(idx - 1, a - 1)
            out[pos] = (current[pos] + 1 + shift) % a
        return out
    weights = np.array([math.comb(n, d) * (a - 1) ** d for d in range(r + 1)], dtype=float)
    d = int(rng.choice(r + 1, p=weights / weights.sum()))
    if d:
        pos = rng.choice(n, size=d, replace=False)
        out[pos] = (current[pos] + rng.integers(1, a, size=d)) % a
    return out


def sample_log_dirichlet(concentrations, rng):
    """Log of a Dirichlet draw, stable for tiny concentrations.

    Uses ``G_a = G_{a+1} U^{1/a}`` so that components whose gamma variates
    underflow still get finite logs.
    """
    a = np.asarray(concentrations, dtype=float)
    if np.any(a <= 0):
        raise InvalidArgumentError("Dirichlet concentrations must be positive")
    log_g = np.log(rng.gamma(a + 1.0)) + np.log1p(-rng.random(a.shape)) / a
    return log_g - log_sum_exp(log_g)


def gibbs_update_dirichlet_row(alpha, m, counts, rng):
    """Draw from ``Dirichlet(alpha / m + counts)``."""
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (m,) or np.any(counts < 0):
        raise InvalidArgumentError(f"counts must be {m} nonnegative numbers")
    row = np.exp(sample_log_dirichlet(alpha / m + counts, rng))
    return row / row.sum()


def _inverse_gamma(shape, rate, rng):
    if np.ndim(rate) == 0 and np.ndim(shape) == 0:
        return rate / rng.gamma(shape)
    return rate / rng.gamma(shape, size=np.broadcast(shape, rate).shape)


def gibbs_update_sigma_beta(pair_count, pair_sq_sum, nu_beta, s_sigma, rng):
    """Update the smoothing variance and its auxiliary scale.

    ``pair_count`` prior increments with squared sum ``pair_sq_sum`` give
    ``sigma_beta2 ~ IG(1/2 + M/2, 1/nu + S/2)`` and then
    ``nu ~ IG(1, 1/s^2 + 1/sigma_beta2)``.
    """
    sigma_beta2 = _inverse_gamma(0.5 + 0.5 * pair_count, 1.0 / nu_beta + 0.5 * pair_sq_sum, rng)
    nu_beta = _inverse_gamma(1.0, 1.0 / s_sigma ** 2 + 1.0 / sigma_beta2, rng)
    return sigma_beta2, nu_beta


def mh_update_log_scale(current, log_target, step, rng):
    """Random-walk Metropolis-Hastings on ``log(current)``.

    Returns
    -------
    value : float
    accepted : bool
    """
    if not current > 0:
        raise InvalidArgumentError("current value must be positive")
    if step == 0:
        return current, True
    proposal = current * math.exp(step * rng.standard_normal())
    log_u = math.log1p(-rng.random())
    new = log_target(proposal)
    if not np.isfinite(new):
        return current, False
    log_ratio = new - log_target(current) + math.log(proposal) - math.log(current)
    if log_u < log_ratio:
        return proposal, True
    return current, False


def _tridiagonal_cholesky(diag, off):
    """Factor symmetric tridiagonal matrices, batched over leading axes.

    ``diag`` has shape ``(..., K)`` and ``off`` ``(K-1,)`` (shared). Returns the
    diagonal and subdiagonal of the lower Cholesky factor.
    """
    K = diag.shape[-1]
    l_diag = np.empty_like(diag)
    l_off = np.empty(diag.shape[:-1] + (max(K - 1, 0),))
    l_diag[..., 0] = np.sqrt(diag[..., 0])
    for k in range(1, K):
        l_off[..., k - 1] = off[k - 1] / l_diag[..., k - 1]
        pivot = diag[..., k] - l_off[..., k - 1] ** 2
        if np.any(pivot <= 0):
            raise InconsistentStateError("random-effects precision is not positive definite")
        l_diag[..., k] = np.sqrt(pivot)
    return l_diag, l_off


def _forward(l_diag, l_off, b):
    x = np.empty_like(b)
    x[..., 0] = b[..., 0] / l_diag[..., 0]
    for k in range(1, b.shape[-1]):
        x[..., k] = (b[..., k] - l_off[..., k - 1] * x[..., k - 1]) / l_diag[..., k]
    return x


def _backward(l_diag, l_off, b):
    x = np.empty_like(b)
    K = b.shape[-1]
    x[..., K - 1] = b[..., K - 1] / l_diag[..., K - 1]
    for k in range(K - 2, -1, -1):
        x[..., k] = (b[..., k] - l_off[..., k] * x[..., k + 1]) / l_diag[..., k]
    return x


def _random_effects_bands(counts, sigma_eps2, sigma_us, sigma_ua):
    counts = np.asarray(counts, dtype=float)
    if not (sigma_eps2 > 0 and sigma_us > 0 and sigma_ua > 0):
        raise InconsistentStateError("random-effect variances must be positive")
    if not (np.isfinite(sigma_us) and np.isfinite(sigma_ua)):
        raise InconsistentStateError("random-effects precision is singular")
    K = counts.shape[-1]
    penalty_diag = np.full(K, 2.0)
    penalty_diag[[0, -1]] = 1.0
    if K == 1:
        penalty_diag[:] = 0.0
    diag = counts / sigma_eps2 + penalty_diag / sigma_us ** 2 + 1.0 / sigma_ua ** 2
    off = np.full(K - 1, -1.0 / sigma_us ** 2)
    return diag, off


def gibbs_update_random_effects(counts, sums, sigma_eps2, sigma_us, sigma_ua, rng):
    """Draw random-effect coefficient rows from their Gaussian full conditionals.

    Parameters
    ----------
    counts : array_like, shape (K,) or (n, K)
        Number of observations of each subject at each location, i.e. the
        diagonal of ``B_i' B_i`` for the hat basis at the knots.
    sums : array_like, same shape
        ``B_i' r_i``: per-location sums of the residuals ``y - f``.

    The precision ``diag(counts)/sigma_eps2 + P/sigma_us^2 + I/sigma_ua^2`` is
    tridiagonal, so each row costs O(K).
    """
    counts = np.asarray(counts, dtype=float)
    sums = np.asarray(sums, dtype=float)
    if counts.shape != sums.shape:
        raise InvalidArgumentError("counts and sums must have the same shape")
    diag, off = _random_effects_bands(counts, sigma_eps2, sigma_us, sigma_ua)
    l_diag, l_off = _tridiagonal_cholesky(diag, off)
    mean = _backward(l_diag, l_off, _forward(l_diag, l_off, sums / sigma_eps2))
    noise = _backward(l_diag, l_off, rng.standard_normal(sums.shape))
    return mean + noise


def random_effects_posterior(counts, sums, sigma_eps2, sigma_us, sigma_ua):
    """Mean and covariance of one subject's random-effect row, from the banded factor."""
    counts = np.asarray(counts, dtype=float)
    diag, off = _random_effects_bands(counts, sigma_eps2, sigma_us, sigma_ua)
    l_diag, l_off = _tridiagonal_cholesky(diag, off)
    mean = _backward(l_diag, l_off, _forward(l_diag, l_off, np.asarray(sums, float) / sigma_eps2))
    K = counts.size
    inv_lower = np.stack([_forward(l_diag, l_off, e) for e in np.eye(K)], axis=1)
    return mean, inv_lower.T @ inv_lower


def gibbs_update_sigma_eps(num_obs, residual_sq_sum, a_sigma, b_sigma, rng):
    """Draw ``sigma_eps2 ~ IG(a + N/2, b + r'r/2)``."""
    if num_obs < 0 or residual_sq_sum < 0:
        raise InvalidArgumentError("counts and sums of squares must be nonnegative")
    return _inverse_gamma(a_sigma + 0.5 * num_obs, b_sigma + 0.5 * residual_sq_sum, rng)


def _log_half_cauchy(x, scale):
    return math.log(2.0 / (math.pi * scale)) - math.log1p((x / scale) ** 2)


def _log_gamma_density(x, shape, rate):
    return shape * math.log(rate) - math.lgamma(shape) + (shape - 1.0) * math.log(x) - rate * x


class _Design:
    """Index structures shared by every iteration."""

    def __init__(self, dataset, alphabet=None):
        self.K = dataset.num_times
        self.space = CovariateSpace(dataset.levels, alphabet)
        self.combinations, row_combo = np.unique(dataset.x - 1, axis=0, return_inverse=True)
        self.row_combo = row_combo.reshape(-1)
        self.C = self.combinations.shape[0]
        self.row_time = dataset.time - 1
        self.subjects = dataset.subjects
        index = {s: i for i, s in enumerate(self.subjects)}
        self.row_subject = np.array([index[s] for s in dataset.subject], dtype=np.int64)
        self.n = len(self.subjects)
        self.y = dataset.y.copy()
        self.cell = self.row_time * self.C + self.row_combo
        self.counts = np.bincount(self.cell, minlength=self.K * self.C).reshape(self.K, self.C).astype(float)
        self.subject_cell = self.row_subject * self.K + self.row_time
        self.subject_counts = np.bincount(
            self.subject_cell, minlength=self.n * self.K
        ).reshape(self.n, self.K).astype(float)


class GibbsSampler:
    """State and transition kernel of one chain.

    Parameters
    ----------
    dataset : Dataset
    config : SamplerConfig
    rng : numpy.random.Generator, optional
        Defaults to ``default_rng(config.seed)``.
    """

    def __init__(self, dataset, config=None, rng=None):
        self.config = config or SamplerConfig()
        self.hp = self.config.hyperparameters
        dataset.validate(require_coverage=False)
        if dataset.n_rows == 0:
            raise InvalidArgumentError("the dataset has no observations")
        self.dataset = dataset
        self.d = _Design(dataset, self.config.alphabet)
        self.rng = rng if rng is not None else np.random.default_rng(self.config.seed)
        space = self.d.space
        self.p = space.p
        self.K = self.d.K
        self.alphabet = space.alphabet
        self.radix = space.radix
        self.use_second = self.p > 1 if self.config.second_layer is None else bool(self.config.second_layer)
        self.random_effects_on = bool(self.hp.random_effects)
        y = self.d.y
        self.prior_mean0 = float(np.mean(y)) if self.hp.prior_mean0 is None else float(self.hp.prior_mean0)
        spread = float(np.var(y))
        self.prior_var0 = (self.hp.vague_scale * (spread if spread > 0 else 1.0)
                           if self.hp.prior_var0 is None else float(self.hp.prior_var0))
        self.phi_shape = self.hp.phi_shape(self.p)
        self.phi_rate = self.hp.phi_rate(self.p)
        self.penalty_eig = penalty_eigenvalues(self.K)
        self.accept = {name: [0, 0] for name in ("partition", "cell_label", "alpha", "alpha_star", "phi", "sigma_us", "sigma_ua")}
        self.iteration = 0
        self._initialize()

    # ------------------------------------------------------------------ setup
    @property
    def diffuse(self):
        return (self.prior_mean0, self.prior_var0)

    def _initialize(self):
        init = self.config.initial
        K, p = self.K, self.p
        labels = init.get("labels")
        if labels is None:
            labels = initial_labels(self.d.space.levels, self.alphabet, K, self.config.init)
        self.labels = [np.array(lab, dtype=np.int64).reshape(K, -1) for lab in labels]
        for j, lab in enumerate(self.labels):
            if lab.shape != (K, self.d.space.levels[j]):
                raise InvalidArgumentError(f"initial labels of predictor {j} have shape {lab.shape}")
        validate_labels([lab.ravel() for lab in self.labels], self.alphabet)
        self.ell = np.array([[np.unique(self.labels[j][k]).size for k in range(K)] for j in range(p)],
                            dtype=np.int64)
        self.sigma_eps2 = float(init.get("sigma_eps2", 1.0))
        self.sigma_beta2 = float(init.get("sigma_beta2", 1.0))
        self.nu_beta = float(init.get("nu_beta", 1.0))
        self.sigma_us = float(init.get("sigma_us", 1.0))
        self.sigma_ua = float(init.get("sigma_ua", 1.0))
        self.alpha = np.broadcast_to(np.asarray(init.get("alpha", 1.0), float), (p,)).copy()
        self.alpha_star = float(init.get("alpha_star", 1.0))
        self.phi = np.asarray(init.get("phi", self.phi_shape / self.phi_rate), float).copy() * np.ones(p)
        with np.errstate(divide="ignore"):
            self.log_pi0 = [np.log(np.asarray(r, float)) for r in init["pi0"]] if "pi0" in init else [
                np.full(z, -math.log(z)) for z in self.alphabet]
            self.log_trans = [np.log(np.asarray(r, float)) for r in init["transitions"]] if "transitions" in init else [
                np.full((z, z), -math.log(z)) for z in self.alphabet]
        self._refresh_size_priors()

        self.keys = np.stack([
            composite_keys([self.labels[j][k] for j in range(p)], self.d.combinations, self.alphabet)
            for k in range(K)
        ])
        self.ell_k = [int(np.prod(self.ell[:, k])) for k in range(K)]
        self.second = []
        self.membership = []
        self.m = []
        for k in range(K):
            occupied = np.unique(self.keys[k])
            if self.use_second:
                g = {int(key): i for i, key in enumerate(occupied.tolist())}
                self.second.append(g)
                combo_labels = np.array([g[int(key)] for key in self.keys[k]], dtype=np.int64)
            else:
                self.second.append(None)
                combo_labels = self.keys[k]
            mem, m = canonical_membership(combo_labels)
            self.membership.append(mem)
            self.m.append(m)
        self.second_lp = np.zeros(K)
        self.log_pistar = [None] * K
        if self.use_second:
            self._refresh_second_layer_prior()
            for k in range(K):
                self.log_pistar[k] = np.full(self.ell_k[k], -math.log(self.ell_k[k]))

        if self.random_effects_on:
            u = init.get("random_effects")
            self.u = np.zeros((self.d.n, K)) if u is None else np.array(u, float).reshape(self.d.n, K)
        else:
            self.u = np.zeros((self.d.n, K))
        self._refresh_stats()
        if "beta" in init:
            self.beta = [np.array(b, float).reshape(self.m[k]) for k, b in enumerate(init["beta"])]
        else:
            self.beta = [self._initial_core(k) for k in range(K)]

    def _initial_core(self, k):
        stats = self._cluster_stats(k, self.membership[k], self.m[k])
        mask = self.d.row_time == k
        fallback = float(np.mean(self.d.y[mask])) if mask.any() else self.prior_mean0
        with np.errstate(invalid="ignore", divide="ignore"):
            means = stats.total / stats.count
        return np.where(stats.count > 0, means, fallback)

    def _refresh_size_priors(self):
        self.size_lp = [partition_size_log_probs(self.phi[j], self.alphabet[j]) for j in range(self.p)]

    def _refresh_second_layer_prior(self):
        for k in range(self.K):
            labels = np.fromiter(self.second[k].values(), dtype=np.int64)
            self.second_lp[k] = log_prior_second_layer(labels, self.ell_k[k], self.alpha_star)

    def _refresh_stats(self):
        d = self.d
        size = self.K * d.C
        r = d.y - self.u[d.row_subject, d.row_time]
        self.S1 = np.bincount(d.cell, weights=r, minlength=size).reshape(self.K, d.C)
        self.S2 = np.bincount(d.cell, weights=r * r, minlength=size).reshape(self.K, d.C)

    def set_response(self, y):
        """Replace the responses (same rows), e.g. for simulation-based checks."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.d.y.shape:
            raise InvalidArgumentError("response vector has the wrong length")
        self.d.y = y.copy()
        self._refresh_stats()

    # ------------------------------------------------------- partition moves
    def _cluster_stats(self, k, membership, m):
        return ClusterStats.pooled(membership, m, self.d.counts[k], self.S1[k], self.S2[k])

    def _neighbors(self, k, membership, m):
        nb = NeighborSums.empty(m)
        if k > 0:
            nb = nb + neighbor_sums(membership, m, self.membership[k - 1], self.m[k - 1], self.beta[k - 1])
        if k < self.K - 1:
            nb = nb + neighbor_sums(membership, m, self.membership[k + 1], self.m[k + 1], self.beta[k + 1])
        return nb

    def _location_evidence(self, k, membership, m):
        """Collapsed evidence at ``k``; same value as :func:`location_evidence`, fewer allocations."""
        counts = np.bincount(membership, self.d.counts[k], m)
        total = np.bincount(membership, self.S1[k], m)
        total_sq = np.bincount(membership, self.S2[k], m)
        nb_count = np.zeros(m)
        nb_total = np.zeros(m)
        nb_sq = np.zeros(m)
        for nk in (k - 1, k + 1):
            if 0 <= nk < self.K:
                m2 = self.m[nk]
                mark = np.zeros(m * m2, dtype=bool)
                mark[membership * m2 + self.membership[nk]] = True
                pairs = np.flatnonzero(mark)
                h = pairs // m2
                values = self.beta[nk][pairs % m2]
                nb_count += np.bincount(h, minlength=m)
                nb_total += np.bincount(h, values, m)
                nb_sq += np.bincount(h, values * values, m)
        sb2, se2 = self.sigma_beta2, self.sigma_eps2
        precision = nb_count / sb2
        weighted = nb_total / sb2
        weighted_sq = nb_sq / sb2
        factors = nb_count.copy()
        log_var_sum = nb_count * math.log(sb2)
        if k == 0:
            m0, v0 = self.diffuse
            precision += 1.0 / v0
            weighted += m0 / v0
            weighted_sq += m0 * m0 / v0
            factors += 1.0
            log_var_sum += math.log(v0)
        prior_var = 1.0 / precision
        prior_mean = weighted * prior_var
        spread = np.maximum(weighted_sq - prior_mean * weighted, 0.0)
        post_var = 1.0 / (counts / se2 + precision)
        post_mean = post_var * (total / se2 + weighted)
        quad = total_sq / se2 + prior_mean * weighted - post_mean * post_mean / post_var
        value = (-0.5 * counts.sum() * (LOG_2PI + math.log(se2))
                 + 0.5 * np.sum(np.log(post_var) - (factors - 1.0) * LOG_2PI - log_var_sum - spread - quad))
        return float(value), post_mean, post_var

    def _draw_core(self, k):
        membership, m = self.membership[k], self.m[k]
        stats = self._cluster_stats(k, membership, m)
        prior_mean, prior_var, _ = gaussian_product(self._neighbors(k, membership, m),
                                                    self.sigma_beta2, self.diffuse if k == 0 else None)
        post_var = 1.0 / (stats.count / self.sigma_eps2 + 1.0 / prior_var)
        post_mean = post_var * (stats.total / self.sigma_eps2 + prior_mean / prior_var)
        self.beta[k] = post_mean + np.sqrt(post_var) * self.rng.standard_normal(m)

    def _chain_terms(self, j, k, row):
        lab = self.labels[j]
        if k == 0:
            total = self.log_pi0[j][row].sum()
        else:
            total = self.log_trans[j][lab[k - 1], row].sum()
        if k < self.K - 1:
            total += self.log_trans[j][row, lab[k + 1]].sum()
        return total

    def mh_update_partition(self, j, k, current_evidence=None):
        """Collapsed Metropolis-Hastings move for the labels of predictor ``j`` at location ``k``.

        ``current_evidence`` may pass the collapsed evidence of the current
        partition at ``k`` when it is already known. Returns ``True`` when the
        proposal is accepted; the evidence of the resulting state is left in
        ``self.evidence_k``.
        """
        d = self.d
        self.evidence_k = current_evidence
        old = self.labels[j][k]
        new = propose_hamming_ball(old, self.config.hamming_radius, self.alphabet[j], self.rng)
        if np.array_equal(new, old):
            self._draw_core(k)
            return True
        col = d.combinations[:, j]
        keys_new = self.keys[k] + (new[col] - old[col]) * self.radix[j]
        ell_j_old = int(self.ell[j, k])
        ell_j_new = int(np.unique(new).size)
        ell_k_old = self.ell_k[k]
        ell_k_new = ell_k_old // ell_j_old * ell_j_new
        log_ratio = 0.0
        g_new = None
        if self.use_second:
            occupied, inverse = np.unique(keys_new, return_inverse=True)
            g_old = self.second[k]
            cell_labels = np.empty(occupied.size, dtype=np.int64)
            fresh = 0
            for i, key in enumerate(occupied.tolist()):
                lab = g_old.get(key)
                if lab is None:
                    lab = int(self.rng.integers(ell_k_new))
                    fresh += 1
                elif lab >= ell_k_new:
                    return False
                cell_labels[i] = lab
            dropped = len(g_old) - (occupied.size - fresh)
            second_lp_new = log_prior_second_layer(cell_labels, ell_k_new, self.alpha_star)
            log_ratio += second_lp_new - self.second_lp[k]
            log_ratio += fresh * math.log(ell_k_new) - dropped * math.log(ell_k_old)
            g_new = dict(zip(occupied.tolist(), cell_labels.tolist()))
            combo_labels = cell_labels[inverse.reshape(-1)]
        else:
            combo_labels = keys_new
        membership, m = canonical_membership(combo_labels)
        log_ratio += self._chain_terms(j, k, new) - self._chain_terms(j, k, old)
        log_ratio += self.size_lp[j][ell_j_new - 1] - self.size_lp[j][ell_j_old - 1]
        if not self.config.ignore_likelihood:
            ev_new, post_mean, post_var = self._location_evidence(k, membership, m)
            if self.evidence_k is None:
                self.evidence_k = self._location_evidence(k, self.membership[k], self.m[k])[0]
            log_ratio += ev_new - self.evidence_k
        if not math.log1p(-self.rng.random()) < log_ratio:
            return False
        self.labels[j][k] = new
        self.ell[j, k] = ell_j_new
        self.ell_k[k] = ell_k_new
        self.keys[k] = keys_new
        self.membership[k] = membership
        self.m[k] = m
        if self.use_second:
            self.second[k] = g_new
            self.second_lp[k] = second_lp_new
        if self.config.ignore_likelihood:
            self._draw_core(k)
        else:
            self.evidence_k = ev_new
            self.beta[k] = post_mean + np.sqrt(post_var) * self.rng.standard_normal(m)
        return True

    def relabel_second_layer(self, k):
        """Move each used second-layer label at ``k`` to a random unused value.

        The second-layer prior is exchangeable in label values, so renaming
        a whole cluster leaves the target unchanged and is always accepted.
        It frees small label values so that moves shrinking ``ell_k`` are not
        blocked by a large label on a kept cell.
        """
        ell = self.ell_k[k]
        g = self.second[k]
        used = sorted(set(g.values()))
        if ell <= len(used):
            return
        for _ in range(len(used)):
            # symmetric proposal: a uniform used label to a uniform unused value
            h = used[int(self.rng.integers(len(used)))]
            candidate = int(self.rng.integers(ell - len(used)))
            for t in used:
                if t <= candidate:
                    candidate += 1
                else:
                    break
            used = sorted(candidate if v == h else v for v in used)
            g = {key: (candidate if lab == h else lab) for key, lab in g.items()}
        self.second[k] = g

    def mh_update_cell_label(self, k, cell, current_evidence=None):
        """Collapsed Metropolis-Hastings move for one occupied cell's second-layer label.

        Half of the proposals reuse a label held by another occupied cell
        (merging clusters); the rest are uniform over all other labels.
        """
        self.evidence_k = current_evidence
        ell = self.ell_k[k]
        if ell < 2:
            return False
        keys, inverse = np.unique(self.keys[k], return_inverse=True)
        inverse = inverse.reshape(-1)
        g = self.second[k]
        labels = np.array([g[key] for key in keys.tolist()], dtype=np.int64)
        current = int(labels[cell])
        others = np.delete(labels, cell)
        used = np.unique(others)

        def log_q(src, dst):
            pool = used[used != src]
            uniform = 1.0 / (ell - 1)
            if pool.size == 0:
                return math.log(uniform)
            return math.log(0.5 * uniform + 0.5 * float(np.any(pool == dst)) / pool.size)

        pool = used[used != current]
        if pool.size and self.rng.random() < 0.5:
            proposal = int(pool[self.rng.integers(pool.size)])
        else:
            proposal = int(self.rng.integers(ell - 1))
            proposal += proposal >= current
        a = self.alpha_star / ell
        log_ratio = (math.log(a + np.count_nonzero(others == proposal))
                     - math.log(a + np.count_nonzero(others == current))
                     + log_q(proposal, current) - log_q(current, proposal))
        labels[cell] = proposal
        membership, m = canonical_membership(labels[inverse])
        if not self.config.ignore_likelihood:
            ev_new, post_mean, post_var = self._location_evidence(k, membership, m)
            if self.evidence_k is None:
                self.evidence_k = self._location_evidence(k, self.membership[k], self.m[k])[0]
            log_ratio += ev_new - self.evidence_k
        if not math.log1p(-self.rng.random()) < log_ratio:
            return False
        g[int(keys[cell])] = proposal
        self.second_lp[k] = log_prior_second_layer(labels, ell, self.alpha_star)
        self.membership[k] = membership
        self.m[k] = m
        if self.config.ignore_likelihood:
            self._draw_core(k)
        else:
            self.evidence_k = ev_new
            self.beta[k] = post_mean + np.sqrt(post_var) * self.rng.standard_normal(m)
        return True

    # ------------------------------------------------------------ other steps
    def _update_sigma_beta(self):
        count, sq = 0, 0.0
        for k in range(1, self.K):
            code = self.membership[k] * self.m[k - 1] + self.membership[k - 1]
            pairs = np.unique(code)
            diff = self.beta[k][pairs // self.m[k - 1]] - self.beta[k - 1][pairs % self.m[k - 1]]
            count += pairs.size
            sq += float(np.dot(diff, diff))
        self.sigma_beta2, self.nu_beta = gibbs_update_sigma_beta(count, sq, self.nu_beta,
                                                                 self.hp.s_sigma, self.rng)

    def _update_chains(self):
        hp = self.hp
        fixed = self.config.fixed
        for j in range(self.p):
            z = self.alphabet[j]
            lab = self.labels[j]
            if "initial_distribution" not in fixed:
                n0 = np.bincount(lab[0], minlength=z)
                self.log_pi0[j] = sample_log_dirichlet(self.alpha[j] / z + n0, self.rng)
            if "transitions" not in fixed:
                counts = np.bincount((lab[:-1] * z + lab[1:]).ravel(), minlength=z * z).reshape(z, z)
                self.log_trans[j] = np.stack([sample_log_dirichlet(self.alpha[j] / z + counts[h], self.rng)
                                              for h in range(z)])
            if "alpha" not in fixed:
                log_sum = self.log_pi0[j].sum() + self.log_trans[j].sum()

                def target(a, z=z, log_sum=log_sum):
                    base = gammaln(a) - z * gammaln(a / z)
                    return (_log_gamma_density(a, hp.a_alpha, hp.b_alpha)
                            + (z + 1) * base + (a / z - 1.0) * log_sum)

                self.alpha[j], ok = mh_update_log_scale(self.alpha[j], target, hp.mh_log_step, self.rng)
                self._count("alpha", ok)

    def _update_second_layer(self):
        hp = self.hp
        fixed = self.config.fixed
        if "second_layer_probs" not in fixed:
            for k in range(self.K):
                ell = self.ell_k[k]
                counts = np.bincount(np.fromiter(self.second[k].values(), dtype=np.int64), minlength=ell)
                self.log_pistar[k] = sample_log_dirichlet(self.alpha_star / ell + counts, self.rng)
        if "alpha_star" not in fixed:
            sizes = np.array(self.ell_k, dtype=float)
            log_sums = np.array([row.sum() for row in self.log_pistar])

            def target(a):
                return (_log_gamma_density(a, hp.a_alpha_star, hp.b_alpha_star)
                        + float(np.sum(gammaln(a) - sizes * gammaln(a / sizes) + (a / sizes - 1.0) * log_sums)))

            self.alpha_star, ok = mh_update_log_scale(self.alpha_star, target, hp.mh_log_step, self.rng)
            self._count("alpha_star", ok)
            self._refresh_second_layer_prior()

    def _update_phi(self):
        for j in range(self.p):
            total = float(self.ell[j].sum())
            support = np.arange(1, self.alphabet[j] + 1)
            shape, rate = self.phi_shape[j], self.phi_rate[j]

            def target(phi, total=total, support=support, shape=shape, rate=rate):
                return (_log_gamma_density(phi, shape, rate) - phi * total
                        - self.K * log_sum_exp(-phi * support))

            self.phi[j], ok = mh_update_log_scale(self.phi[j], target, self.hp.mh_log_step, self.rng)
            self._count("phi", ok)
        self._refresh_size_priors()

    def _fixed_effect_rows(self):
        d = self.d
        table = np.stack([self.beta[k][self.membership[k]] for k in range(self.K)])
        return table[d.row_time, d.row_combo]

    def _update_random_effects(self, f_rows):
        d = self.d
        fixed = self.config.fixed
        if "random_effects" not in fixed:
            r = d.y - f_rows
            sums = np.bincount(d.subject_cell, weights=r, minlength=d.n * self.K).reshape(d.n, self.K)
            self.u = gibbs_update_random_effects(d.subject_counts, sums, self.sigma_eps2,
                                                 self.sigma_us, self.sigma_ua, self.rng)
        if "random_effect_scales" in fixed:
            return
        sq = float(np.sum(self.u * self.u))
        diffs = np.diff(self.u, axis=1)
        pen = float(np.sum(diffs * diffs))
        n, s = d.n, self.hp.s_sigma
        eig = self.penalty_eig

        def target(us, ua):
            logdet = float(np.sum(np.log(1.0 / ua ** 2 + eig / us ** 2)))
            return (0.5 * n * logdet - 0.5 * (sq / ua ** 2 + pen / us ** 2)
                    + _log_half_cauchy(us, s) + _log_half_cauchy(ua, s))

        step = self.hp.mh_log_step
        self.sigma_us, ok = mh_update_log_scale(self.sigma_us, lambda v: target(v, self.sigma_ua), step, self.rng)
        self._count("sigma_us", ok)
        self.sigma_ua, ok = mh_update_log_scale(self.sigma_ua, lambda v: target(self.sigma_us, v), step, self.rng)
        self._count("sigma_ua", ok)

    def _count(self, name, accepted):
        self.accept[name][0] += bool(accepted)
        self.accept[name][1] += 1

    def step(self):
        """Run one full iteration."""
        fixed = self.config.fixed
        self.iteration += 1
        self._refresh_stats()
        if "partitions" not in fixed:
            for k in range(self.K):
                self.evidence_k = None
                if self.use_second:
                    self.relabel_second_layer(k)
                for j in range(self.p):
                    self._count("partition", self.mh_update_partition(j, k, self.evidence_k))
                if self.use_second:
                    for cell in range(len(self.second[k])):
                        self._count("cell_label", self.mh_update_cell_label(k, cell, self.evidence_k))
        if "core" not in fixed:
            for k in range(self.K):
                self._draw_core(k)
        if "sigma_beta" not in fixed:
            self._update_sigma_beta()
        self._update_chains()
        if self.use_second:
            self._update_second_layer()
        if "phi" not in fixed:
            self._update_phi()
        f_rows = self._fixed_effect_rows()
        if self.random_effects_on and self.iteration > self.config.warmup:
            self._update_random_effects(f_rows)
        if "sigma_eps" not in fixed:
            r = self.d.y - f_rows - self.u[self.d.row_subject, self.d.row_time]
            self.sigma_eps2 = gibbs_update_sigma_eps(r.size, float(np.dot(r, r)),
                                                     self.hp.a_sigma, self.hp.b_sigma, self.rng)
        if not (math.isfinite(self.sigma_eps2) and math.isfinite(self.sigma_beta2)
                and all(np.all(np.isfinite(b)) for b in self.beta)):
            raise InconsistentStateError("non-finite variance or coefficient")

    # ---------------------------------------------------------------- output
    def record(self):
        """Snapshot of the current state as plain Python containers."""
        rec = {
            "iteration": self.iteration,
            "labels": [lab.tolist() for lab in self.labels],
            "membership": [mem.tolist() for mem in self.membership],
            "beta": [b.tolist() for b in self.beta],
            "sigma_eps2": self.sigma_eps2,
            "sigma_beta2": self.sigma_beta2,
            "nu_beta": self.nu_beta,
            "alpha": self.alpha.tolist(),
            "phi": self.phi.tolist(),
            "alpha_star": self.alpha_star,
            "pi0": [np.exp(row).tolist() for row in self.log_pi0],
            "transitions": [np.exp(mat).tolist() for mat in self.log_trans],
        }
        if self.random_effects_on:
            rec["sigma_us"] = self.sigma_us
            rec["sigma_ua"] = self.sigma_ua
            rec["random_effects"] = self.u.tolist()
        return rec

    def metadata(self):
        hp = self.hp.as_dict()
        hp["prior_mean0"] = self.prior_mean0
        hp["prior_var0"] = self.prior_var0
        return {
            "format": "lfmm-samples",
            "version": 1,
            "seed": int(self.config.seed),
            "hyperparameters": hp,
            "hamming_radius": int(self.config.hamming_radius),
            "warmup": int(self.config.warmup),
            "levels": list(self.d.space.levels),
            "alphabet": list(self.alphabet),
            "num_times": self.K,
            "combinations": self.d.combinations.tolist(),
            "subjects": [str(s) for s in self.d.subjects],
            "second_layer": self.use_second,
            "random_effects": self.random_effects_on,
            "data_digest": self.dataset.digest(),
            "num_draws": self.hp.num_draws,
        }

    def acceptance_rates(self):
        return {name: (acc / tot if tot else float("nan")) for name, (acc, tot) in self.accept.items()}

    def run(self, callback=None):
        """Run the configured schedule and return the stored draws."""
        hp = self.hp
        store = SampleStore(self.metadata())
        every = self.config.progress_every
        for it in range(1, hp.iterations + 1):
            try:
                self.step()
            except LFMMError as err:
                raise SamplerError(str(err), iteration=it) from err
            except (FloatingPointError, ValueError, np.linalg.LinAlgError) as err:
                raise SamplerError(f"{type(err).__name__}: {err}", iteration=it) from err
            if it > hp.burn_in and (it - hp.burn_in) % hp.thin == 0:
                store.append(self.record())
            if callback is not None:
                callback(self)
            if every and it % every == 0:
                rates = ", ".join(f"{k}={v:.2f}" for k, v in self.acceptance_rates().items() if v == v)
                logger.info("iteration %d/%d; acceptance: %s", it, hp.iterations, rates)
        return store


def run_chain(config, data, rng=None):
    """Run one chain on ``data`` and return its :class:`SampleStore`."""
    if not isinstance(data, Dataset):
        raise InvalidArgumentError("data must be a Dataset")
    return GibbsSampler(data, config, rng).run()
