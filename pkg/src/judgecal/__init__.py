"""Cluster-conditioned prompt-ensemble calibration for black-box judges.

The package turns cached judge outputs (per-prompt choice log-scores plus
image embeddings) into calibrated prompt-ensemble weights, optionally
conditioned on soft image-cluster membership, and evaluates the resulting
predictors with calibration, classification, ranking, and selective-risk
metrics backed by permutation tests and FDR control.
"""

from .clustering import ClusterModel, fit_spherical_kmeans, similarity
from .ensemble import (
    EnsembleWeights,
    FitReport,
    LogLikTensor,
    build_loglik_tensor,
    closed_form_weights,
    fit_bpe,
    fit_mmb,
    objective_and_gradient,
    predict,
    select_baseline,
)
from .errors import (
    ArgumentError,
    ArityError,
    CapacityError,
    DimensionError,
    DomainError,
    FormatError,
    IntegrityError,
    JudgecalError,
    ValidationError,
)
from .ingest import (
    DatasetBundle,
    EmbeddingTable,
    JudgeRecord,
    assemble_bundle,
    load_bundle,
    load_embeddings,
    load_judge_records,
    normalize_choice_logprobs,
    save_bundle,
    split_dataset,
)
from .metrics import (
    PredictionSet,
    ReliabilityBins,
    calibration_errors,
    classification_scores,
    error_coverage_curve,
    mean_confidence,
    proper_scores,
    ranking_scores,
)
from .pipeline import (
    GridCell,
    MethodSpec,
    RunConfig,
    cmd_compare,
    cmd_eval,
    cmd_fit,
    cmd_report,
    cmd_synth,
    derive_seed,
    load_config,
)
from .stats import (
    FdrDecision,
    PairedScores,
    bootstrap_mean_ci,
    by_fdr,
    paired_permutation_test,
)
from .synth import (
    GroundTruth,
    SynthConfig,
    default_reliability,
    generate_benchmark,
    generate_no_preference_pairs,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "ArityError",
    "CapacityError",
    "ClusterModel",
    "DatasetBundle",
    "DimensionError",
    "DomainError",
    "EmbeddingTable",
    "EnsembleWeights",
    "FdrDecision",
    "FitReport",
    "FormatError",
    "GridCell",
    "GroundTruth",
    "IntegrityError",
    "JudgeRecord",
    "JudgecalError",
    "LogLikTensor",
    "MethodSpec",
    "PairedScores",
    "PredictionSet",
    "ReliabilityBins",
    "RunConfig",
    "SynthConfig",
    "ValidationError",
    "assemble_bundle",
    "bootstrap_mean_ci",
    "build_loglik_tensor",
    "by_fdr",
    "calibration_errors",
    "classification_scores",
    "closed_form_weights",
    "cmd_compare",
    "cmd_eval",
    "cmd_fit",
    "cmd_report",
    "cmd_synth",
    "default_reliability",
    "derive_seed",
    "error_coverage_curve",
    "fit_bpe",
    "fit_mmb",
    "fit_spherical_kmeans",
    "generate_benchmark",
    "generate_no_preference_pairs",
    "load_bundle",
    "load_config",
    "load_embeddings",
    "load_judge_records",
    "mean_confidence",
    "normalize_choice_logprobs",
    "objective_and_gradient",
    "paired_permutation_test",
    "predict",
    "proper_scores",
    "ranking_scores",
    "save_bundle",
    "select_baseline",
    "similarity",
    "split_dataset",
    "__version__",
]
