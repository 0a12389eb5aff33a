"""Scikit-learn style wrapper around the sampler."""
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .exceptions import InvalidArgumentError
from .posterior import posterior_predictive
from .sampler import GibbsSampler, SamplerConfig
from .state import Hyperparameters

__all__ = ["LFMMRegressor"]


class LFMMRegressor(RegressorMixin, BaseEstimator):
    """Bayesian functional mixed model with time-varying local variable selection.

    ``X`` has columns ``[subject, time, x_1, ..., x_p]``: a numeric subject
    id, the time index in ``1..T`` and 1-based categorical levels.

    Parameters
    ----------
    iterations, burn_in, thin : int
        MCMC schedule.
    random_effects : bool
        Include subject-specific random-effect curves.
    hamming_radius : int
        Radius of the label proposals.
    alphabet : tuple of int, optional
        Label alphabet size per predictor; defaults to the level counts.
    levels : tuple of int, optional
        Level counts; inferred from the training data when omitted.
    num_times : int, optional
        Number of time points ``T``; inferred when omitted.
    hyperparameters : Hyperparameters, optional
        Prior constants; the schedule arguments above take precedence.
    warmup : int, optional
        Opening iterations with frozen random effects; defaults to a fifth
        of ``burn_in``.
    random_state : int
    """

    def __init__(self, iterations=7500, burn_in=2500, thin=5, random_effects=True,
                 hamming_radius=1, alphabet=None, levels=None, num_times=None,
                 hyperparameters=None, warmup=None, random_state=0):
        self.iterations = iterations
        self.burn_in = burn_in
        self.thin = thin
        self.random_effects = random_effects
        self.hamming_radius = hamming_radius
        self.alphabet = alphabet
        self.levels = levels
        self.num_times = num_times
        self.hyperparameters = hyperparameters
        self.warmup = warmup
        self.random_state = random_state

    def _to_dataset(self, X, y, levels, num_times):
        X = np.asarray(X)
        if X.shape[1] < 3:
            raise InvalidArgumentError("X needs subject, time and at least one predictor column")
        if np.any(X != np.round(X)):
            raise InvalidArgumentError("X must hold integer codes")
        X = X.astype(np.int64)
        subject = X[:, 0]
        time = X[:, 1]
        order = np.lexsort((time, subject))
        trial = np.empty(X.shape[0], dtype=np.int64)
        # trials number the repeated rows of a (subject, time) pair
        pairs = subject * (int(time.max()) + 1) + time
        seen = {}
        for i in order:
            seen[pairs[i]] = seen.get(pairs[i], 0) + 1
            trial[i] = seen[pairs[i]]
        return Dataset(subject.astype(str), trial, time, y, X[:, 2:], levels, num_times)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        Xi = X[:, 2:].astype(np.int64)
        levels = self.levels if self.levels is not None else tuple(max(2, int(v)) for v in Xi.max(axis=0))
        num_times = self.num_times if self.num_times is not None else int(X[:, 1].max())
        dataset = self._to_dataset(X, y, levels, num_times)
        dataset.validate(require_coverage=True)
        hp = self.hyperparameters or Hyperparameters()
        hp = hp.replace(iterations=self.iterations, burn_in=self.burn_in, thin=self.thin,
                        random_effects=self.random_effects)
        config = SamplerConfig(hyperparameters=hp, hamming_radius=self.hamming_radius,
                               seed=self.random_state, alphabet=self.alphabet, warmup=self.warmup)
        self.sampler_ = GibbsSampler(dataset, config)
        self.samples_ = self.sampler_.run()
        self.levels_ = tuple(levels)
        self.num_times_ = num_times
        self.n_features_in_ = X.shape[1]
        return self

    def _predictive(self, X, level):
        check_is_fitted(self, "samples_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InvalidArgumentError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        dataset = self._to_dataset(X, np.zeros(X.shape[0]), self.levels_, self.num_times_)
        dataset.validate(require_coverage=False)
        return posterior_predictive(self.samples_, dataset, rng=self.random_state, level=level)

    def predict(self, X):
        """Posterior predictive mean of each row."""
        return self._predictive(X, 0.95).mean

    def predict_interval(self, X, level=0.95):
        """Equal-tailed posterior predictive interval of each row."""
        result = self._predictive(X, level)
        return result.lower, result.upper
