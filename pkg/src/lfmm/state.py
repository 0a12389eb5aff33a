"""Model parameters, partition bookkeeping and the discrete priors.

Levels and labels are 0-based throughout the package internals; the CSV
format and the command line use 1-based levels.
"""
from dataclasses import dataclass, field, fields, replace
import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .exceptions import InconsistentStateError, InvalidArgumentError

__all__ = [
    "Hyperparameters",
    "CovariateSpace",
    "Partition",
    "derive_partition",
    "composite_keys",
    "log_prior_partition_size",
    "partition_size_log_probs",
    "log_sum_exp",
    "log_prior_chain_segment",
    "log_prior_second_layer",
    "log_dirichlet_density",
    "difference_penalty",
    "penalty_eigenvalues",
]


@dataclass(frozen=True)
class Hyperparameters:
    """Fixed prior constants and the MCMC schedule.

    ``prior_mean0`` / ``prior_var0`` set the proper diffuse prior on the
    first-location core coefficients. When left as ``None`` they default to
    the sample mean of the response and ``vague_scale`` times its variance.
    ``a_phi`` and ``b_phi`` may be scalars or one value per predictor.
    """

    a_sigma: float = 1.0
    b_sigma: float = 1.0
    s_sigma: float = 1.0
    a_alpha: float = 1.0
    b_alpha: float = 1.0
    a_alpha_star: float = 1.0
    b_alpha_star: float = 1.0
    a_phi: object = 5.0
    b_phi: object = 1.0
    vague_scale: float = 1e4
    prior_mean0: Optional[float] = None
    prior_var0: Optional[float] = None
    mh_log_step: float = 0.5
    iterations: int = 7500
    burn_in: int = 2500
    thin: int = 5
    random_effects: bool = True

    def __post_init__(self):
        positive = ["a_sigma", "b_sigma", "s_sigma", "a_alpha", "b_alpha",
                    "a_alpha_star", "b_alpha_star", "vague_scale", "mh_log_step"]
        for name in positive:
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise InvalidArgumentError(f"{name} must be a positive finite number, got {value!r}")
        for name in ("a_phi", "b_phi"):
            values = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if values.size == 0 or np.any(~np.isfinite(values)) or np.any(values <= 0):
                raise InvalidArgumentError(f"{name} must be positive")
        if self.prior_var0 is not None and not self.prior_var0 > 0:
            raise InvalidArgumentError("prior_var0 must be positive")
        if self.prior_mean0 is not None and not math.isfinite(self.prior_mean0):
            raise InvalidArgumentError("prior_mean0 must be finite")
        for name in ("iterations", "thin"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer")
        if int(self.burn_in) != self.burn_in or self.burn_in < 0:
            raise InvalidArgumentError("burn_in must be a nonnegative integer")
        if self.burn_in >= self.iterations:
            raise InvalidArgumentError("burn_in must be smaller than iterations")

    def phi_shape(self, p):
        return _per_predictor(self.a_phi, p, "a_phi")

    def phi_rate(self, p):
        return _per_predictor(self.b_phi, p, "b_phi")

    @property
    def num_draws(self):
        return len(range(self.burn_in + self.thin, self.iterations + 1, self.thin))

    def replace(self, **changes):
        return replace(self, **changes)

    def as_dict(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                value = value.tolist()
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out


def _per_predictor(value, p, name):
    values = np.atleast_1d(np.asarray(value, dtype=float))
    if values.size == 1:
        return np.full(p, float(values[0]))
    if values.size != p:
        raise InvalidArgumentError(f"{name} has {values.size} entries for {p} predictors")
    return values.copy()


@dataclass(frozen=True)
class CovariateSpace:
    """Level counts ``levels[j]`` and label alphabet sizes ``alphabet[j]``."""

    levels: tuple
    alphabet: tuple = None

    def __post_init__(self):
        levels = tuple(int(v) for v in self.levels)
        if not levels:
            raise InvalidArgumentError("at least one predictor is required")
        if any(v < 2 for v in levels):
            raise InvalidArgumentError(f"every predictor needs >= 2 levels, got {levels}")
        alphabet = levels if self.alphabet is None else tuple(int(v) for v in self.alphabet)
        if len(alphabet) != len(levels):
            raise InvalidArgumentError("alphabet and levels must have equal length")
        for a, x in zip(alphabet, levels):
            if not 2 <= a <= x:
                raise InvalidArgumentError(f"label alphabet size {a} must lie in [2, {x}]")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "alphabet", alphabet)

    @property
    def p(self):
        return len(self.levels)

    @property
    def size(self):
        return int(np.prod(self.levels, dtype=np.int64))

    @property
    def radix(self):
        """Mixed-radix multipliers that encode a label tuple as one integer."""
        return np.concatenate([[1], np.cumprod(self.alphabet[:-1])]).astype(np.int64)

    def all_combinations(self):
        grids = np.meshgrid(*[np.arange(x) for x in self.levels], indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)


def composite_keys(first_layer, combinations, alphabet):
    """Encode each combination's tuple of first-layer labels as one integer."""
    combinations = np.asarray(combinations, dtype=np.int64)
    radix = np.concatenate([[1], np.cumprod(alphabet[:-1])]).astype(np.int64)
    keys = np.zeros(combinations.shape[0], dtype=np.int64)
    for j, labels in enumerate(first_layer):
        keys += np.asarray(labels, dtype=np.int64)[combinations[:, j]] * radix[j]
    return keys


@dataclass
class Partition:
    """Set partition of the observed combinations at one location.

    ``membership[c]`` is the cell of combination ``c``; cells are numbered by
    their lexicographically smallest member.
    """

    membership: np.ndarray
    cells: list = field(default_factory=list)

    @property
    def size(self):
        return len(self.cells)

    def as_sets(self):
        return [frozenset(cell) for cell in self.cells]


def canonical_membership(labels):
    """Relabel ``labels`` so cells are numbered in order of first appearance."""
    labels = np.asarray(labels)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse.reshape(-1)], first.size


def derive_partition(first_layer, second_layer, combinations):
    """Partition of ``combinations`` induced by two layers of labels.

    Parameters
    ----------
    first_layer : sequence of array_like
        ``first_layer[j][x]`` is the label of level ``x`` of predictor ``j``.
    second_layer : mapping or None
        Maps a tuple of first-layer labels (one occupied core cell) to its
        second-layer label. ``None`` means every core cell is its own cluster.
    combinations : array_like, shape (C, p)
        Observed level combinations.
    """
    combinations = np.asarray(combinations, dtype=np.int64)
    if combinations.ndim != 2 or combinations.shape[1] != len(first_layer):
        raise InvalidArgumentError("combinations must have one column per predictor")
    order = np.lexsort(combinations.T[::-1])
    cell_keys = [
        tuple(int(first_layer[j][combinations[c, j]]) for j in range(len(first_layer)))
        for c in range(combinations.shape[0])
    ]
    if second_layer is None:
        labels = cell_keys
    else:
        labels = []
        for key in cell_keys:
            if key not in second_layer:
                raise InconsistentStateError(f"occupied core cell {key} has no second-layer label")
            labels.append(second_layer[key])
    codes = {}
    coded = np.array([codes.setdefault(lab, len(codes)) for lab in labels], dtype=np.int64)
    membership_sorted, m = canonical_membership(coded[order])
    membership = np.empty_like(membership_sorted)
    membership[order] = membership_sorted
    cells = [[] for _ in range(m)]
    for c in order:
        cells[membership[c]].append(tuple(int(v) for v in combinations[c]))
    return Partition(membership=membership, cells=cells)


def log_sum_exp(x):
    """``log(sum(exp(x)))`` of a 1-D array.

    scipy's version carries array-API dispatch costs that dominate on the
    short vectors of the sampler's inner loop.
    """
    x = np.asarray(x, dtype=float)
    top = x.max()
    if not np.isfinite(top):
        return float(top)
    return float(top + np.log(np.exp(x - top).sum()))


def partition_size_log_probs(phi, support):
    """Log probabilities of sizes ``1..support`` under ``exp(-phi * size)``."""
    sizes = np.arange(1, support + 1)
    logits = -phi * sizes
    return logits - log_sum_exp(logits)


def log_prior_partition_size(size, phi, support):
    """Normalized log prior of a partition size under exponential decay."""
    if int(size) != size or not 1 <= size <= support:
        raise InvalidArgumentError(f"size {size} outside 1..{support}")
    if phi < 0 or not math.isfinite(phi):
        raise InvalidArgumentError("phi must be finite and nonnegative")
    return float(-phi * size - log_sum_exp(-phi * np.arange(1, support + 1)))


def log_prior_chain_segment(labels, k, log_initial, log_transition):
    """Every Markov-chain log term that involves location ``k``.

    ``labels`` has shape ``(K, x_max)``; each level is an independent chain
    over locations sharing the initial distribution and transition matrix.
    """
    labels = np.asarray(labels)
    K = labels.shape[0]
    here = labels[k]
    if k == 0:
        total = log_initial[here].sum()
    else:
        total = log_transition[labels[k - 1], here].sum()
    if k < K - 1:
        total += log_transition[here, labels[k + 1]].sum()
    return float(total)


def log_prior_second_layer(labels, size, concentration):
    """Dirichlet-multinomial log probability of second-layer labels.

    The probability vector over ``size`` labels is integrated out against
    its symmetric ``Dirichlet(concentration / size)`` prior.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    _, counts = np.unique(labels, return_counts=True)
    a = concentration / size
    return float(
        gammaln(concentration) - gammaln(concentration + labels.size)
        + np.sum(gammaln(a + counts)) - counts.size * gammaln(a)
    )


def log_dirichlet_density(log_probs, concentrations):
    """Dirichlet log density evaluated from log-probabilities.

    Working with logs keeps rows whose entries underflow to zero finite.
    """
    concentrations = np.asarray(concentrations, dtype=float)
    return float(
        gammaln(concentrations.sum()) - gammaln(concentrations).sum()
        + np.dot(concentrations - 1.0, log_probs)
    )


def difference_penalty(K):
    """First-difference penalty ``D'D`` for ``K`` coefficients."""
    if K < 1:
        raise InvalidArgumentError("K must be positive")
    D = np.diff(np.eye(K), axis=0)
    return D.T @ D


def penalty_eigenvalues(K):
    """Closed-form eigenvalues of ``difference_penalty(K)``."""
    return 2.0 - 2.0 * np.cos(np.pi * np.arange(K) / K)


def initial_labels(levels, alphabet, K, mode="separate"):
    """First-layer labels at the start of a chain, one ``(K, x_max)`` array per predictor."""
    out = []
    for x_max, z_max in zip(levels, alphabet):
        if mode == "separate":
            row = np.minimum(np.arange(x_max), z_max - 1)
        elif mode == "fused":
            row = np.zeros(x_max, dtype=np.int64)
        else:
            raise InvalidArgumentError(f"unknown initialization {mode!r}")
        out.append(np.tile(row.astype(np.int64), (K, 1)))
    return out


def check_simplex(row, tol=1e-12):
    row = np.asarray(row, dtype=float)
    return bool(np.all(row >= 0) and abs(row.sum() - 1.0) <= tol)


def validate_labels(first_layer: Sequence, alphabet):
    for j, labels in enumerate(first_layer):
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= alphabet[j]):
            raise InvalidArgumentError(f"labels of predictor {j} outside 0..{alphabet[j] - 1}")
