"""Semivalue data valuation under differentially private gradient release."""

from .data import CsvSchema, PartitionedDataset, corrupt_labels, load_csv, partition, synth_classification
from .dp import (
    NoiseConfig,
    RollingGradientState,
    calibrate_sigma,
    clip_gradient,
    combine_diag,
    effective_noise_variance,
    release_correlated,
    sample_noise,
)
from .models import InitSpec, ModelSpec, UtilitySpec, grad, init_params, utility
from .valuation import (
    RunConfig,
    SemivalueSpec,
    ValuationResult,
    estimation_stats,
    exact_semivalue,
    permutation_expectation,
    run_federated,
    run_valuation,
    semivalue_weights,
)

__all__ = [
    "CsvSchema",
    "PartitionedDataset",
    "corrupt_labels",
    "load_csv",
    "partition",
    "synth_classification",
    "NoiseConfig",
    "RollingGradientState",
    "calibrate_sigma",
    "clip_gradient",
    "combine_diag",
    "effective_noise_variance",
    "release_correlated",
    "sample_noise",
    "InitSpec",
    "ModelSpec",
    "UtilitySpec",
    "grad",
    "init_params",
    "utility",
    "RunConfig",
    "SemivalueSpec",
    "ValuationResult",
    "estimation_stats",
    "exact_semivalue",
    "permutation_expectation",
    "run_federated",
    "run_valuation",
    "semivalue_weights",
]

__version__ = "0.1.0"
