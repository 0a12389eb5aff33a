"""Conjugate Gaussian algebra for the core spline coefficients.

Given the partition at one location, each cluster coefficient has a Gaussian
smoothing prior built from the coefficients expressed by its members at the
neighbouring locations, and a Gaussian likelihood from the main-effects
residuals ``y - u_i(t)`` of the observations it covers. Everything here is
vectorized over the clusters of a single location.
"""
from dataclasses import dataclass

import numpy as np

from .exceptions import InconsistentStateError, InvalidArgumentError

__all__ = [
    "ClusterStats",
    "NeighborSums",
    "neighbor_sums",
    "gaussian_product",
    "smoothing_prior_moments",
    "posterior_moments",
    "log_marginal_likelihood_location",
    "sample_core_coefficient",
    "location_evidence",
]

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class ClusterStats:
    """Observation count, residual sum and residual sum of squares per cluster."""

    count: np.ndarray
    total: np.ndarray
    total_sq: np.ndarray

    @classmethod
    def from_residuals(cls, residual_groups):
        groups = [np.asarray(g, dtype=float) for g in residual_groups]
        return cls(
            count=np.array([g.size for g in groups], dtype=float),
            total=np.array([g.sum() for g in groups]),
            total_sq=np.array([np.dot(g, g) for g in groups]),
        )

    @classmethod
    def pooled(cls, membership, m, count, total, total_sq):
        """Pool per-combination statistics into ``m`` clusters."""
        return cls(
            count=np.bincount(membership, weights=count, minlength=m),
            total=np.bincount(membership, weights=total, minlength=m),
            total_sq=np.bincount(membership, weights=total_sq, minlength=m),
        )


@dataclass
class NeighborSums:
    """Distinct neighbouring coefficients per cluster: count, sum, sum of squares."""

    count: np.ndarray
    total: np.ndarray
    total_sq: np.ndarray

    @classmethod
    def empty(cls, m):
        return cls(np.zeros(m), np.zeros(m), np.zeros(m))

    def __add__(self, other):
        return NeighborSums(self.count + other.count, self.total + other.total,
                            self.total_sq + other.total_sq)


def neighbor_sums(membership, m, neighbor_membership, neighbor_m, neighbor_beta):
    """Collect the distinct neighbouring clusters expressed by each cluster.

    ``membership`` and ``neighbor_membership`` give, for every observed
    combination, its cluster at this location and at the adjacent one.
    A neighbouring cluster counts once per cluster no matter how many
    members express it.
    """
    code = membership * neighbor_m + neighbor_membership
    pairs = np.unique(code)
    h = pairs // neighbor_m
    values = np.asarray(neighbor_beta, dtype=float)[pairs % neighbor_m]
    return NeighborSums(
        count=np.bincount(h, minlength=m).astype(float),
        total=np.bincount(h, weights=values, minlength=m),
        total_sq=np.bincount(h, weights=values * values, minlength=m),
    )


def gaussian_product(neighbors, sigma_beta2, diffuse=None):
    """Combine the Gaussian factors of the smoothing prior of each cluster.

    Every distinct neighbour ``v`` contributes ``N(beta; v, sigma_beta2)``;
    ``diffuse=(mean, var)`` adds one proper factor ``N(beta; mean, var)``.
    The product equals ``exp(log_norm) * N(beta; mean, var)``.

    Returns
    -------
    mean, var, log_norm : ndarray
    """
    count = neighbors.count.astype(float)
    precision = count / sigma_beta2
    weighted = neighbors.total / sigma_beta2
    weighted_sq = neighbors.total_sq / sigma_beta2
    factors = count.copy()
    log_var_sum = count * np.log(sigma_beta2)
    if diffuse is not None:
        m0, v0 = diffuse
        precision = precision + 1.0 / v0
        weighted = weighted + m0 / v0
        weighted_sq = weighted_sq + m0 * m0 / v0
        factors = factors + 1.0
        log_var_sum = log_var_sum + np.log(v0)
    if np.any(precision <= 0):
        raise InvalidArgumentError("a cluster has no neighbours and no diffuse prior")
    var = 1.0 / precision
    mean = weighted * var
    spread = np.maximum(weighted_sq - mean * weighted, 0.0)
    log_norm = -0.5 * (factors - 1.0) * LOG_2PI - 0.5 * log_var_sum + 0.5 * np.log(var) - 0.5 * spread
    return mean, var, log_norm


def smoothing_prior_moments(predecessors, successors, sigma_beta2, diffuse=None):
    """Mean and variance of the smoothing prior of one cluster.

    ``predecessors`` / ``successors`` are the distinct core coefficients
    expressed by the cluster's members at the previous / next location.
    With no neighbours the ``diffuse`` ``(mean, var)`` prior is returned.
    """
    values = np.concatenate([np.asarray(predecessors, float).ravel(),
                             np.asarray(successors, float).ravel()])
    if values.size == 0:
        if diffuse is None:
            raise InvalidArgumentError("no neighbours and no diffuse prior")
        return float(diffuse[0]), float(diffuse[1])
    if sigma_beta2 <= 0:
        raise InvalidArgumentError("sigma_beta2 must be positive")
    sums = NeighborSums(np.array([values.size], float), np.array([values.sum()]),
                        np.array([np.dot(values, values)]))
    mean, var, _ = gaussian_product(sums, sigma_beta2, diffuse)
    return float(mean[0]), float(var[0])


def posterior_moments(prior_mean, prior_var, count, total, sigma_eps2):
    """Gaussian full-conditional moments of cluster coefficients.

    Works elementwise on arrays; ``count`` observations with residual sum
    ``total`` and noise variance ``sigma_eps2``.
    """
    prior_mean = np.asarray(prior_mean, dtype=float)
    prior_var = np.asarray(prior_var, dtype=float)
    post_precision = np.asarray(count, dtype=float) / sigma_eps2 + 1.0 / prior_var
    post_var = 1.0 / post_precision
    post_mean = post_var * (np.asarray(total, dtype=float) / sigma_eps2 + prior_mean / prior_var)
    if post_mean.ndim == 0:
        return float(post_mean), float(post_var)
    return post_mean, post_var


def _cluster_log_evidence(prior_mean, prior_var, stats, sigma_eps2):
    post_mean, post_var = posterior_moments(prior_mean, prior_var, stats.count,
                                            stats.total, sigma_eps2)
    quad = (stats.total_sq / sigma_eps2 + prior_mean * prior_mean / prior_var
            - post_mean * post_mean / post_var)
    terms = (-0.5 * stats.count * (LOG_2PI + np.log(sigma_eps2))
             - 0.5 * np.log(prior_var) + 0.5 * np.log(post_var) - 0.5 * quad)
    return terms, post_mean, post_var


def log_marginal_likelihood_location(prior_mean, prior_var, stats, sigma_eps2):
    """Log evidence of one location's data with every cluster coefficient integrated out.

    Parameters
    ----------
    prior_mean, prior_var : array_like, shape (m,)
        Smoothing prior moments of the ``m`` clusters.
    stats : ClusterStats
        Residual sufficient statistics of the same clusters.
    sigma_eps2 : float
    """
    prior_mean = np.atleast_1d(np.asarray(prior_mean, dtype=float))
    prior_var = np.atleast_1d(np.asarray(prior_var, dtype=float))
    if sigma_eps2 <= 0 or np.any(prior_var <= 0):
        raise InconsistentStateError("variances must be positive")
    if not (prior_mean.shape == prior_var.shape == np.shape(stats.count)):
        raise InvalidArgumentError("statistics must cover every cluster")
    terms, _, _ = _cluster_log_evidence(prior_mean, prior_var, stats, sigma_eps2)
    return float(terms.sum())


def sample_core_coefficient(prior_mean, prior_var, stats, sigma_eps2, rng):
    """Draw cluster coefficients from their Gaussian full conditionals."""
    post_mean, post_var = posterior_moments(prior_mean, prior_var, stats.count,
                                            stats.total, sigma_eps2)
    return post_mean + np.sqrt(post_var) * rng.standard_normal(np.shape(post_mean))


def location_evidence(stats, neighbors, sigma_beta2, sigma_eps2, diffuse=None):
    """Collapsed log evidence of one location including the prior's normalizer.

    The smoothing prior of a cluster is a product of Gaussian factors whose
    normalizing constant depends on which neighbours the cluster touches, so
    it is kept when comparing candidate partitions.

    Returns
    -------
    log_evidence : float
    post_mean, post_var : ndarray
        Full-conditional moments of the cluster coefficients.
    """
    prior_mean, prior_var, log_norm = gaussian_product(neighbors, sigma_beta2, diffuse)
    terms, post_mean, post_var = _cluster_log_evidence(prior_mean, prior_var, stats, sigma_eps2)
    return float(terms.sum() + log_norm.sum()), post_mean, post_var
