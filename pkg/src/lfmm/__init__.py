"""Longitudinal functional mixed models with hidden Markov tensor partitions."""
from .basis import KnotGrid, build_grid, design_matrix, eval_basis, eval_curve
from .data import Dataset, ScenarioConfig, SyntheticTruth, generate_synthetic, load_dataset, write_dataset
from .estimator import LFMMRegressor
from .exceptions import (
    DatasetParseError,
    InconsistentStateError,
    InvalidArgumentError,
    LFMMError,
    OutOfDomainError,
    SamplerError,
)
from .io import read_config, read_samples, write_config, write_samples, write_summary
from .posterior import (
    SampleStore,
    anova_effects,
    cluster_count_probabilities,
    fixed_effect_summary,
    geweke_diagnostic,
    pairwise_interval_tests,
    posterior_predictive,
)
from .sampler import GibbsSampler, SamplerConfig, run_chain
from .state import CovariateSpace, Hyperparameters, derive_partition

__version__ = "0.1.0"

__all__ = [
    "KnotGrid", "build_grid", "design_matrix", "eval_basis", "eval_curve",
    "Dataset", "ScenarioConfig", "SyntheticTruth", "generate_synthetic", "load_dataset", "write_dataset",
    "LFMMRegressor",
    "DatasetParseError", "InconsistentStateError", "InvalidArgumentError", "LFMMError",
    "OutOfDomainError", "SamplerError",
    "read_config", "read_samples", "write_config", "write_samples", "write_summary",
    "SampleStore", "anova_effects", "cluster_count_probabilities", "fixed_effect_summary",
    "geweke_diagnostic", "pairwise_interval_tests", "posterior_predictive",
    "GibbsSampler", "SamplerConfig", "run_chain",
    "CovariateSpace", "Hyperparameters", "derive_partition",
]
