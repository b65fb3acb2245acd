"""slicekit: find, explain, and exploit error-prone slices of a classifier.

Fit a mixture over embeddings, error distances, and confidence rows of a
labeled validation set; use it to flag error-prone points in unlabeled data,
explain the flagged slices through feature significance, and improve a frozen
classifier by abstention, prediction flipping, or active learning.

The SLICEKIT_THREADS environment variable caps BLAS/OpenMP worker counts; it
must be set before the first numpy import in the process, so the mapping
happens here, ahead of every other module.
"""

import os as _os

_threads = _os.environ.get("SLICEKIT_THREADS", "")
if _threads.isdigit() and int(_threads) > 0:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

from .bundle import (
    FeatureTable,
    LabeledBundle,
    PcaTransform,
    UnlabeledBundle,
    apply_pca,
    error_distance,
    error_distances,
    fit_pca,
    load_bundle,
    load_feature_table,
    save_bundle,
    save_feature_table,
)
from .discover import (
    DiscoverReport,
    confidence_baseline,
    discover_report,
    efficacy,
    random_baseline,
)
from .errors import (
    ConfigError,
    FeatureNotApplicableError,
    InsufficientDataError,
    InvalidLabelError,
    ProtocolError,
    RangeError,
    ShapeError,
    SliceKitError,
    UndefinedEfficacyError,
    UnsupportedModeError,
    ValidationError,
)
from .explain import (
    SliceFeatureReport,
    average_weighted_v,
    build_synthetic_feature_dataset,
    homo_comp,
    permutation_test,
    significant_features,
    synthetic_detection_scores,
)
from .improve import (
    CurveReport,
    LoopConfig,
    LoopResult,
    active_learning,
    confidence_flip_baseline,
    flip_predictions,
    selective_prediction,
    validate_flip_threshold,
)
from .mixture import EmConfig, EmResult, WeightConfig, em_fit
from .sdm import (
    DISCOVER_WEIGHTS,
    DOMINO_WEIGHTS,
    EXPLAIN_WEIGHTS,
    SliceAssignment,
    SliceModel,
    assign_labeled,
    detect_error_prone,
    fit_domino,
    fit_edisa,
    infer_slices,
    load_model,
    marginal_loglik,
    save_model,
    structure_variant,
)
from .synth import (
    ClassifierScenario,
    PlantedData,
    PlantedSpec,
    generate_classifier_scenario,
    generate_planted,
    load_truth,
    save_truth,
)

__version__ = "0.1.0"

__all__ = [
    "ClassifierScenario",
    "ConfigError",
    "CurveReport",
    "DISCOVER_WEIGHTS",
    "DOMINO_WEIGHTS",
    "DiscoverReport",
    "EXPLAIN_WEIGHTS",
    "EmConfig",
    "EmResult",
    "FeatureNotApplicableError",
    "FeatureTable",
    "InsufficientDataError",
    "InvalidLabelError",
    "LabeledBundle",
    "LoopConfig",
    "LoopResult",
    "PcaTransform",
    "PlantedData",
    "PlantedSpec",
    "ProtocolError",
    "RangeError",
    "ShapeError",
    "SliceAssignment",
    "SliceFeatureReport",
    "SliceKitError",
    "SliceModel",
    "UndefinedEfficacyError",
    "UnlabeledBundle",
    "UnsupportedModeError",
    "ValidationError",
    "WeightConfig",
    "active_learning",
    "apply_pca",
    "assign_labeled",
    "average_weighted_v",
    "build_synthetic_feature_dataset",
    "confidence_baseline",
    "confidence_flip_baseline",
    "detect_error_prone",
    "discover_report",
    "efficacy",
    "em_fit",
    "error_distance",
    "error_distances",
    "fit_domino",
    "fit_edisa",
    "fit_pca",
    "flip_predictions",
    "generate_classifier_scenario",
    "generate_planted",
    "homo_comp",
    "infer_slices",
    "load_bundle",
    "load_feature_table",
    "load_model",
    "load_truth",
    "marginal_loglik",
    "permutation_test",
    "random_baseline",
    "save_bundle",
    "save_feature_table",
    "save_model",
    "save_truth",
    "selective_prediction",
    "significant_features",
    "structure_variant",
    "synthetic_detection_scores",
    "validate_flip_threshold",
]
