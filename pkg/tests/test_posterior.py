import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfmm import InvalidArgumentError, SampleStore, anova_effects, cluster_count_probabilities
from lfmm.data import Dataset
from lfmm.posterior import (
    anova_from_store,
    expand_draw,
    fixed_effect_summary,
    format_geweke,
    geweke_diagnostic,
    marginal_means,
    pairwise_interval_tests,
    posterior_predictive,
)

ALL_2x3 = [list(c) for c in itertools.product(range(2), range(3))]


def make_store(draws, combinations=ALL_2x3, levels=(2, 3), K=2, random_effects=False, subjects=("s1",)):
    meta = {"levels": list(levels), "alphabet": list(levels), "num_times": K,
            "combinations": combinations, "subjects": list(subjects), "random_effects": random_effects}
    return SampleStore(meta, draws)


def draw_from_curves(curves, combinations, sigma_eps2=1.0):
    """A record whose every observed combination is its own cluster."""
    K = curves.shape[-1]
    levels = curves.shape[:-1]
    labels = [[list(range(x)) for _ in range(K)] for x in levels]
    return {
        "labels": labels,
        "membership": [list(range(len(combinations))) for _ in range(K)],
        "beta": [[float(curves[tuple(c)][k]) for c in combinations] for k in range(K)],
        "sigma_eps2": sigma_eps2, "sigma_beta2": 1.0, "alpha": [1.0] * len(levels), "phi": [1.0] * len(levels),
    }


# ---------------------------------------------------------------- ANOVA

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), shape=st.sampled_from([(2, 3), (3, 3), (2, 2, 3), (4,)]))
def test_anova_effects_are_centred(seed, shape):
    curves = np.random.default_rng(seed).normal(size=shape + (5,))
    fx = anova_effects(curves)
    for main in fx.main:
        assert np.allclose(main.sum(axis=0), 0, atol=1e-12)
    for inter in fx.interaction.values():
        assert np.allclose(inter.sum(axis=0), 0, atol=1e-12)
        assert np.allclose(inter.sum(axis=1), 0, atol=1e-12)


def test_anova_additive_surface_has_no_interaction():
    a = np.array([1.0, -1.0])[:, None, None]
    b = np.array([0.5, 0.0, -0.5])[None, :, None]
    curves = 3.0 + a + b + np.zeros((2, 3, 4))
    fx = anova_effects(curves)
    assert np.allclose(fx.overall, 3.0)
    assert np.allclose(fx.interaction[(0, 1)], 0.0, atol=1e-14)
    assert np.allclose(fx.main[0][:, 0], [1.0, -1.0])


def test_anova_needs_a_predictor_axis():
    with pytest.raises(InvalidArgumentError):
        anova_effects(np.zeros(4))


def test_store_anova_matches_dense_decomposition():
    rng = np.random.default_rng(3)
    curves = [rng.normal(size=(2, 3, 2)) for _ in range(5)]
    store = make_store([draw_from_curves(c, ALL_2x3) for c in curves])
    effects = anova_from_store(store)
    dense = [anova_effects(c) for c in curves]
    assert np.allclose(effects["overall"][0], np.mean([d.overall for d in dense], axis=0), atol=1e-12)
    assert np.allclose(effects[("main", 1)][0], np.mean([d.main[1] for d in dense], axis=0), atol=1e-12)
    assert np.allclose(effects[("interaction", 0, 1)][0],
                       np.mean([d.interaction[(0, 1)] for d in dense], axis=0), atol=1e-12)


def test_marginal_means_weight_shared_labels():
    # x2 levels 1 and 2 share a label: the grid average weights that label by 2/3
    rec = {"labels": [[[0, 1], [0, 1]], [[0, 0, 1], [0, 0, 1]]],
           "membership": [[0, 1, 2, 3], [0, 1, 2, 3]],
           "beta": [[1.0, 2.0, 3.0, 4.0]] * 2}
    combos = [[0, 0], [0, 2], [1, 0], [1, 2]]
    store = make_store([rec], combinations=combos)
    overall, marginal, _ = marginal_means(store, 0)
    dense = np.array([[1.0, 1.0, 2.0], [3.0, 3.0, 4.0]])
    assert overall[0] == pytest.approx(dense.mean())
    assert np.allclose(marginal[1][:, 0], dense.mean(axis=0))


# ---------------------------------------------------------- partitions

def test_cluster_count_probabilities():
    recs = []
    for sizes in ([1, 2], [2, 2], [1, 1], [2, 1]):
        labels = [[[0, 0] if s == 1 else [0, 1] for s in sizes], [[0, 0, 0]] * 2]
        recs.append({"labels": labels, "membership": [[0] * 6] * 2})
    probs = cluster_count_probabilities(make_store(recs), 0)
    assert probs.shape == (2, 2)
    assert np.allclose(probs, [[0.5, 0.5], [0.5, 0.5]])
    assert np.allclose(cluster_count_probabilities(make_store(recs), 1)[:, 0], 1.0)
    with pytest.raises(InvalidArgumentError):
        cluster_count_probabilities(make_store(recs), 2)
    with pytest.raises(InvalidArgumentError):
        cluster_count_probabilities(make_store([]), 0)


def test_expand_draw_uses_shared_labels():
    # combination (1, 1) is unobserved but shares its label tuple with (1, 0)
    rec = {"labels": [[[0, 1]], [[0, 0, 1]]], "membership": [[0, 1, 2]], "beta": [[1.0, 2.0, 3.0]]}
    combos = [[0, 0], [1, 0], [1, 2]]
    store = make_store([rec], combinations=combos, K=1)
    assert expand_draw(store, 0, (1, 1))[0] == 2.0
    assert expand_draw(store, 0, (1, 2))[0] == 3.0


def test_fixed_effect_summary_observed_and_expanded():
    rec1 = {"labels": [[[0, 1]], [[0, 0, 1]]], "membership": [[0, 1, 2]], "beta": [[1.0, 2.0, 3.0]]}
    rec2 = {"labels": [[[0, 1]], [[0, 0, 1]]], "membership": [[0, 1, 2]], "beta": [[1.0, 4.0, 3.0]]}
    store = make_store([rec1, rec2], combinations=[[0, 0], [1, 0], [1, 2]], K=1)
    mean, lower, upper = fixed_effect_summary(store, (1, 0))
    assert mean[0] == 3.0 and lower[0] >= 2.0 and upper[0] <= 4.0
    with pytest.warns(UserWarning):
        mean, _, _ = fixed_effect_summary(store, (1, 1))
    assert mean[0] == 3.0
    with pytest.raises(InvalidArgumentError):
        fixed_effect_summary(store, (2, 0))
    with pytest.raises(InvalidArgumentError):
        fixed_effect_summary(store, (0, 0), level=1.0)


def test_pairwise_interval_tests():
    curves = np.zeros((2, 3, 2))
    curves[1] += 2.0
    store = make_store([draw_from_curves(curves, ALL_2x3)] * 3)
    probs, reject = pairwise_interval_tests(store, 0, 1.0)
    assert np.all(probs[(0, 1)] == 1.0) and np.all(reject[(0, 1)])
    probs, reject = pairwise_interval_tests(store, 1, 0.1)
    assert all(np.all(v == 0) for v in probs.values())
    with pytest.raises(InvalidArgumentError):
        pairwise_interval_tests(store, 0, -1.0)


# ----------------------------------------------------------- diagnostics

def test_geweke_stationary_chain_is_unremarkable():
    rng = np.random.default_rng(0)
    zs = [geweke_diagnostic(rng.normal(size=2000))[0] for _ in range(200)]
    assert abs(np.mean(zs)) < 3 * 1 / math.sqrt(200)
    assert 0.7 < np.std(zs) < 1.3


def test_geweke_detects_drift():
    z, p = geweke_diagnostic(np.linspace(0, 10, 1000) + np.random.default_rng(1).normal(size=1000))
    assert z < -5 and p < 1e-6


def test_geweke_edge_cases():
    assert geweke_diagnostic(np.ones(500)) == (0.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        geweke_diagnostic(np.ones(50))
    with pytest.raises(InvalidArgumentError):
        geweke_diagnostic(np.ones(500), first=0.6, last=0.5)
    assert format_geweke(-0.2364, 0.8132) == "-0.236 (0.81)"


# ------------------------------------------------------------ prediction

def test_predictive_known_and_new_subjects():
    curves = np.arange(12, dtype=float).reshape(2, 3, 2)
    rec = draw_from_curves(curves, ALL_2x3, sigma_eps2=1e-12)
    rec.update(random_effects=[[0.5, -0.5]], sigma_us=1e-6, sigma_ua=1e-6)
    store = make_store([rec] * 4, random_effects=True)
    ds = Dataset(["s1", "s1", "new"], [1, 1, 1], [1, 2, 1], [1.5, 10.5, 11.0], [[1, 1], [2, 2], [2, 2]], (2, 3), 2)
    result = posterior_predictive(store, ds, rng=0)
    assert np.allclose(result.mean, [0.5, 8.5, 8.0], atol=1e-4)
    assert result.coverage == pytest.approx(0.0)
    expected_rmse = math.sqrt((1.0 + 2.0 ** 2 + 3.0 ** 2) / 3)
    assert result.rmse == pytest.approx(expected_rmse, abs=1e-4)


def test_predictive_interval_covers_at_nominal_rate():
    rng = np.random.default_rng(2)
    curves = np.zeros((2, 3, 2))
    store = make_store([draw_from_curves(curves, ALL_2x3, sigma_eps2=1.0)] * 400)
    n = 3000
    x = np.stack([rng.integers(1, 3, n), rng.integers(1, 4, n)], axis=1)
    ds = Dataset([f"s{i}" for i in range(n)], np.ones(n), rng.integers(1, 3, n), rng.normal(size=n), x, (2, 3), 2)
    result = posterior_predictive(store, ds, rng=3)
    assert abs(result.coverage - 0.95) < 3 * math.sqrt(0.95 * 0.05 / n) + 0.01


def test_predictive_rejects_mismatched_design():
    store = make_store([draw_from_curves(np.zeros((2, 3, 2)), ALL_2x3)])
    ds = Dataset(["a"], [1], [1], [0.0], [[1, 1]], (2, 4), 2)
    with pytest.raises(InvalidArgumentError):
        posterior_predictive(store, ds)
    with pytest.raises(InvalidArgumentError):
        posterior_predictive(make_store([]), ds)
