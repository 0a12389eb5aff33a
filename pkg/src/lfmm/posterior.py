"""Posterior summaries computed from stored draws."""
from dataclasses import dataclass
from functools import cached_property
import itertools
import math
import warnings

import numpy as np
from scipy.stats import norm

from .exceptions import InvalidArgumentError

__all__ = [
    "SampleStore",
    "EffectDecomposition",
    "cluster_count_probabilities",
    "fixed_effect_summary",
    "expand_draw",
    "anova_effects",
    "anova_from_store",
    "marginal_means",
    "pairwise_interval_tests",
    "geweke_diagnostic",
    "format_geweke",
    "PredictiveResult",
    "posterior_predictive",
]

SCALARS = ("sigma_eps2", "sigma_beta2", "nu_beta", "sigma_us", "sigma_ua", "alpha_star")


class SampleStore:
    """Stored draws of one chain plus the metadata needed to interpret them.

    ``records`` holds one dict per draw with keys ``iteration``, ``labels``
    (per predictor, ``K x x_max`` 0-based labels), ``membership`` (per
    location, the cluster of each observed combination), ``beta`` (per
    location, the core coefficients) and the scalar and row parameters.
    """

    def __init__(self, meta, records=None):
        self.meta = dict(meta)
        self.records = list(records or [])

    def append(self, record):
        self.records.append(record)
        self.__dict__.pop("_arrays", None)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, SampleStore):
            return NotImplemented
        return self.meta == other.meta and self.records == other.records

    @property
    def num_times(self):
        return int(self.meta["num_times"])

    @property
    def levels(self):
        return tuple(self.meta["levels"])

    @property
    def p(self):
        return len(self.meta["levels"])

    @property
    def combinations(self):
        """Observed combinations, 0-based, shape ``(C, p)``."""
        return np.asarray(self.meta["combinations"], dtype=np.int64).reshape(-1, self.p)

    def _require(self):
        if not self.records:
            raise InvalidArgumentError("the sample store is empty")

    @cached_property
    def _arrays(self):
        self._require()
        return {
            "labels": [np.array([r["labels"][j] for r in self.records], dtype=np.int64)
                       for j in range(self.p)],
            "membership": np.array([r["membership"] for r in self.records], dtype=np.int64),
        }

    def labels(self, j):
        """First-layer labels of predictor ``j``: array ``(draws, K, x_max)``."""
        return self._arrays["labels"][j]

    def partition_sizes(self, j):
        """``ell_{j,k}`` per draw: array ``(draws, K)``."""
        lab = self.labels(j)
        z = int(self.meta["alphabet"][j])
        present = np.zeros(lab.shape[:2] + (z,), dtype=bool)
        d, k, _ = np.indices(lab.shape)
        present[d, k, lab] = True
        return present.sum(axis=2)

    def observed_curves(self):
        """Expanded fixed-effect coefficients: array ``(draws, K, C)``."""
        self._require()
        mem = self._arrays["membership"]
        out = np.empty(mem.shape)
        for d, rec in enumerate(self.records):
            for k, beta in enumerate(rec["beta"]):
                out[d, k] = np.asarray(beta)[mem[d, k]]
        return out

    def scalar(self, name):
        self._require()
        if name not in self.records[0]:
            raise InvalidArgumentError(f"draws carry no {name!r}")
        return np.array([r[name] for r in self.records], dtype=float)

    def monitored(self):
        """Scalar traces monitored by the convergence diagnostics."""
        self._require()
        out = {}
        for name in SCALARS:
            if name in self.records[0]:
                out[name] = self.scalar(name)
        for j in range(self.p):
            out[f"alpha[{j + 1}]"] = np.array([r["alpha"][j] for r in self.records])
            out[f"phi[{j + 1}]"] = np.array([r["phi"][j] for r in self.records])
        return out


def cluster_count_probabilities(store, j):
    """``(K, x_max)`` matrix whose entry ``(k, c)`` is the posterior ``P(ell_{j,k} = c + 1)``."""
    if len(store) == 0:
        raise InvalidArgumentError("the sample store is empty")
    if not 0 <= j < store.p:
        raise InvalidArgumentError(f"predictor index {j} out of range")
    sizes = store.partition_sizes(j)
    x_max = store.levels[j]
    out = np.stack([np.bincount(sizes[:, k] - 1, minlength=x_max)[:x_max]
                    for k in range(store.num_times)]).astype(float)
    return out / sizes.shape[0]


class _LocationTable:
    """Value of every label tuple at one draw and location.

    Unobserved combinations share the coefficient of any observed
    combination with the same tuple of first-layer labels. Tuples no observed
    combination realizes take the cluster of the nearest occupied tuple in
    Hamming distance, ties going to the lowest observed combination.
    """

    def __init__(self, labels_k, combinations, membership_k, beta_k):
        self.labels_k = labels_k
        occupied = {}
        for c, combo in enumerate(combinations):
            key = tuple(int(labels_k[j][x]) for j, x in enumerate(combo))
            occupied.setdefault(key, c)
        self.occupied = occupied
        self.occ_keys = np.array(list(occupied.keys()), dtype=np.int64)
        self.occ_combo = np.array(list(occupied.values()), dtype=np.int64)
        self.membership = membership_k
        self.beta = np.asarray(beta_k, dtype=float)
        self.exact = True

    def value(self, key):
        c = self.occupied.get(key)
        if c is None:
            self.exact = False
            dist = np.sum(self.occ_keys != np.asarray(key), axis=1)
            best = np.flatnonzero(dist == dist.min())
            c = int(self.occ_combo[best[np.argmin(self.occ_combo[best])]])
        return self.beta[self.membership[c]]


def expand_draw(store, d, combination):
    """Fixed-effect curve (length K) of a 0-based combination at draw ``d``."""
    rec = store.records[d]
    combos = store.combinations
    combination = tuple(int(v) for v in combination)
    out = np.empty(store.num_times)
    for k in range(store.num_times):
        labels_k = [rec["labels"][j][k] for j in range(store.p)]
        table = _LocationTable(labels_k, combos, rec["membership"][k], rec["beta"][k])
        out[k] = table.value(tuple(labels_k[j][x] for j, x in enumerate(combination)))
    return out


def _combination_index(store, combination):
    combination = np.asarray(combination, dtype=np.int64)
    if combination.shape != (store.p,):
        raise InvalidArgumentError(f"a combination needs {store.p} levels")
    if np.any(combination < 0) or np.any(combination >= np.asarray(store.levels)):
        raise InvalidArgumentError("combination level out of range")
    hits = np.flatnonzero(np.all(store.combinations == combination, axis=1))
    return int(hits[0]) if hits.size else None


def fixed_effect_summary(store, combination, level=0.95):
    """Pointwise posterior mean and equal-tailed interval of one fixed-effect curve.

    ``combination`` holds 0-based levels. An unobserved combination is
    expanded through the sampled partitions with a warning.

    Returns
    -------
    mean, lower, upper : ndarray, shape (K,)
    """
    if not 0 < level < 1:
        raise InvalidArgumentError("level must lie in (0, 1)")
    if len(store) == 0:
        raise InvalidArgumentError("the sample store is empty")
    c = _combination_index(store, combination)
    if c is not None:
        curves = store.observed_curves()[:, :, c]
    else:
        warnings.warn("combination not observed; expanded through the sampled partitions",
                      stacklevel=2)
        curves = np.stack([expand_draw(store, d, combination) for d in range(len(store))])
    tail = 0.5 * (1.0 - level)
    lower, upper = np.quantile(curves, [tail, 1.0 - tail], axis=0)
    return curves.mean(axis=0), lower, upper


@dataclass
class EffectDecomposition:
    """Equal-weight ANOVA decomposition of fixed-effect curves.

    ``main[j]`` has shape ``(x_max_j, K)``; ``interaction[(j1, j2)]`` has
    shape ``(x_max_j1, x_max_j2, K)``.
    """

    overall: np.ndarray
    main: list
    interaction: dict


def anova_effects(curves):
    """Decompose a full curve array of shape ``(x_max_1, ..., x_max_p, K)``."""
    curves = np.asarray(curves, dtype=float)
    p = curves.ndim - 1
    if p < 1:
        raise InvalidArgumentError("need at least one predictor axis")
    axes = tuple(range(p))
    overall = curves.mean(axis=axes)
    marginal = [curves.mean(axis=tuple(a for a in axes if a != j)) for j in range(p)]
    main = [marginal[j] - overall for j in range(p)]
    interaction = {}
    for j1, j2 in itertools.combinations(range(p), 2):
        pair = curves.mean(axis=tuple(a for a in axes if a not in (j1, j2)))
        interaction[(j1, j2)] = (pair - main[j1][:, None, :] - main[j2][None, :, :]
                                 - overall[None, None, :])
    return EffectDecomposition(overall=overall, main=main, interaction=interaction)


def marginal_means(store, d, pairs=(), max_tuples=200_000):
    """Equal-weight averages of draw ``d``'s curves over the full level grid.

    Averages run over label tuples weighted by how many level combinations
    share them, so the grid is never materialized.

    Returns
    -------
    overall : ndarray (K,)
    marginal : list of ndarray (x_max_j, K)
    pair_means : dict mapping (j1, j2) to ndarray (x_max_j1, x_max_j2, K)
    """
    rec = store.records[d]
    p, K, levels = store.p, store.num_times, store.levels
    combos = store.combinations
    overall = np.empty(K)
    marginal = [np.empty((levels[j], K)) for j in range(p)]
    pair_means = {pair: np.empty((levels[pair[0]], levels[pair[1]], K)) for pair in pairs}
    for k in range(K):
        labels_k = [np.asarray(rec["labels"][j][k]) for j in range(p)]
        table = _LocationTable(labels_k, combos, rec["membership"][k], rec["beta"][k])
        distinct = [np.unique(lab, return_counts=True) for lab in labels_k]
        n_tuples = math.prod(len(u) for u, _ in distinct)
        if n_tuples > max_tuples:
            raise InvalidArgumentError(f"{n_tuples} label tuples exceed the limit {max_tuples}")
        grids = np.meshgrid(*[u for u, _ in distinct], indexing="ij")
        weights = np.ones(grids[0].shape) if p else np.ones(())
        for j, (_, cnt) in enumerate(distinct):
            shape = [1] * p
            shape[j] = cnt.size
            weights = weights * (cnt.reshape(shape) / levels[j])
        values = np.vectorize(lambda *key: table.value(tuple(int(v) for v in key)))(*grids)
        overall[k] = float(np.sum(weights * values))
        for j in range(p):
            uniq, cnt = distinct[j]
            # average over the other predictors given predictor j's label
            per_label = np.moveaxis(weights * values, j, 0).reshape(uniq.size, -1).sum(axis=1)
            per_label = per_label / (cnt / levels[j])
            pos = np.searchsorted(uniq, labels_k[j])
            marginal[j][:, k] = per_label[pos]
        for (j1, j2), out in pair_means.items():
            u1, c1 = distinct[j1]
            u2, c2 = distinct[j2]
            moved = np.moveaxis(weights * values, (j1, j2), (0, 1)).reshape(u1.size, u2.size, -1).sum(axis=2)
            moved = moved / np.outer(c1 / levels[j1], c2 / levels[j2])
            out[:, :, k] = moved[np.searchsorted(u1, labels_k[j1])][:, np.searchsorted(u2, labels_k[j2])]
    return overall, marginal, pair_means


def anova_from_store(store, level=0.95, interactions=True):
    """Posterior mean and interval of the overall mean, main effects and pairwise interactions.

    Returns
    -------
    dict mapping an effect name to ``(mean, lower, upper)`` arrays; names are
    ``"overall"``, ``("main", j)`` and ``("interaction", j1, j2)``.
    """
    if len(store) == 0:
        raise InvalidArgumentError("the sample store is empty")
    pairs = list(itertools.combinations(range(store.p), 2)) if interactions else []
    draws = {}
    for d in range(len(store)):
        overall, marginal, pair_means = marginal_means(store, d, pairs)
        draws.setdefault("overall", []).append(overall)
        for j in range(store.p):
            draws.setdefault(("main", j), []).append(marginal[j] - overall)
        for (j1, j2), pm in pair_means.items():
            m1 = marginal[j1] - overall
            m2 = marginal[j2] - overall
            draws.setdefault(("interaction", j1, j2), []).append(
                pm - m1[:, None, :] - m2[None, :, :] - overall)
    tail = 0.5 * (1.0 - level)
    out = {}
    for name, values in draws.items():
        arr = np.stack(values)
        lower, upper = np.quantile(arr, [tail, 1.0 - tail], axis=0)
        out[name] = (arr.mean(axis=0), lower, upper)
    return out


def pairwise_interval_tests(store, j, thresholds, cut=0.95):
    """Posterior probabilities that two levels' main effects differ by more than a margin.

    Parameters
    ----------
    thresholds : float or array_like (K,)
        Margins ``Delta_j(t) >= 0``.

    Returns
    -------
    probs : dict mapping 0-based level pairs ``(a, b)`` to arrays (K,)
    reject : dict with the same keys, boolean arrays ``probs > cut``
    """
    if len(store) == 0:
        raise InvalidArgumentError("the sample store is empty")
    if not 0 <= j < store.p:
        raise InvalidArgumentError(f"predictor index {j} out of range")
    x_max = store.levels[j]
    if x_max < 2:
        raise InvalidArgumentError("the predictor has a single level")
    delta = np.broadcast_to(np.asarray(thresholds, dtype=float), (store.num_times,))
    if np.any(delta < 0):
        raise InvalidArgumentError("thresholds must be nonnegative")
    mains = np.stack([marginal_means(store, d)[1][j] for d in range(len(store))])
    probs, reject = {}, {}
    for a, b in itertools.combinations(range(x_max), 2):
        prob = np.mean(np.abs(mains[:, a] - mains[:, b]) > delta, axis=0)
        probs[(a, b)] = prob
        reject[(a, b)] = prob > cut
    return probs, reject


def _batch_means_variance(x):
    n = x.size
    size = max(1, int(math.isqrt(n)))
    batches = n // size
    if batches < 2:
        return float(np.var(x, ddof=1)) / n if n > 1 else 0.0
    means = x[: batches * size].reshape(batches, size).mean(axis=1)
    # variance of the segment mean from the batch-means estimate of the spectral density at 0
    return float(np.var(means, ddof=1)) * size / n


def geweke_diagnostic(chain, first=0.1, last=0.5, min_length=100):
    """Compare the means of an early and a late segment of a trace.

    Returns
    -------
    z : float
    p_value : float
        Two-sided normal tail probability.
    """
    x = np.asarray(chain, dtype=float).ravel()
    if x.size < min_length:
        raise InvalidArgumentError(f"chain length {x.size} is below the minimum {min_length}")
    if not (0 < first < 1 and 0 < last < 1 and first + last <= 1):
        raise InvalidArgumentError("segment fractions must be in (0, 1) and not overlap")
    a = x[: int(first * x.size)]
    b = x[x.size - int(last * x.size):]
    diff = a.mean() - b.mean()
    se = math.sqrt(_batch_means_variance(a) + _batch_means_variance(b))
    if se == 0:
        if diff == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    z = diff / se
    return float(z), float(2.0 * norm.sf(abs(z)))


def format_geweke(z, p_value):
    """Render as ``-0.236 (0.81)``."""
    return f"{z:.3f} ({p_value:.2f})"


@dataclass
class PredictiveResult:
    draws: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    rmse: float
    coverage: float
    width: float


def posterior_predictive(store, dataset, rng=None, level=0.95):
    """Posterior predictive draws for the rows of ``dataset`` and calibration metrics.

    Known subjects use their sampled random-effect rows; new subjects get a
    fresh curve from the random-effects prior at each draw's scales.
    """
    from .data import sample_random_effect_curves

    if len(store) == 0:
        raise InvalidArgumentError("the sample store is empty")
    rng = np.random.default_rng(rng)
    if tuple(dataset.levels) != store.levels or dataset.num_times != store.num_times:
        raise InvalidArgumentError("held-out data do not match the fitted design")
    K = store.num_times
    time = dataset.time - 1
    combos = dataset.x - 1
    known = {s: i for i, s in enumerate(store.meta["subjects"])}
    row_known = np.array([known.get(str(s), -1) for s in dataset.subject], dtype=np.int64)
    new_subjects = sorted({str(s) for s in dataset.subject if str(s) not in known})
    new_index = {s: i for i, s in enumerate(new_subjects)}
    row_new = np.array([new_index.get(str(s), -1) for s in dataset.subject], dtype=np.int64)

    unique_combos, inverse = np.unique(combos, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    observed_idx = [_combination_index(store, c) for c in unique_combos]
    curves_obs = store.observed_curves()
    use_re = bool(store.meta.get("random_effects", True))
    out = np.empty((len(store), dataset.n_rows))
    for d, rec in enumerate(store.records):
        f_table = np.empty((len(unique_combos), K))
        for u, c in enumerate(observed_idx):
            f_table[u] = curves_obs[d, :, c] if c is not None else expand_draw(store, d, unique_combos[u])
        f = f_table[inverse, time]
        u_rows = np.zeros(dataset.n_rows)
        if use_re:
            re = np.asarray(rec["random_effects"])
            mask = row_known >= 0
            u_rows[mask] = re[row_known[mask], time[mask]]
            if new_subjects:
                fresh = sample_random_effect_curves(len(new_subjects), K, rec["sigma_us"] ** 2,
                                                    rec["sigma_ua"] ** 2, rng)
                u_rows[~mask] = fresh[row_new[~mask], time[~mask]]
        out[d] = f + u_rows + rng.standard_normal(dataset.n_rows) * math.sqrt(rec["sigma_eps2"])
    tail = 0.5 * (1.0 - level)
    mean = out.mean(axis=0)
    lower, upper = np.quantile(out, [tail, 1.0 - tail], axis=0)
    y = dataset.y
    return PredictiveResult(
        draws=out, mean=mean, lower=lower, upper=upper,
        rmse=float(np.sqrt(np.mean((y - mean) ** 2))),
        coverage=float(np.mean((y >= lower) & (y <= upper))),
        width=float(np.mean(upper - lower)),
    )
