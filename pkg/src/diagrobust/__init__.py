"""Perturbed-diagram robustness evaluation: kernels, multi-view inference, metrics."""

__version__ = "0.1.0"

from .image import Image, decode_png, derive_stream, encode_png
from .perturb import (
    DEFAULT_TABLE,
    IntensityLevel,
    IntensityTable,
    PerturbationKind,
    PerturbationSpec,
    ViewPlan,
    apply_perturbation,
    build_view_plan,
)
from .records import AnswerType, QuestionRecord
from .amcv import (
    AnswerSet,
    OrchestratorConfig,
    ResolutionMode,
    consistency_score,
    normalize_answer,
    run_multi_view,
)
from .metrics import MetricsReport, clean_accuracy, compute_report, prs, vdc

__all__ = [
    "AnswerSet",
    "AnswerType",
    "DEFAULT_TABLE",
    "Image",
    "IntensityLevel",
    "IntensityTable",
    "MetricsReport",
    "OrchestratorConfig",
    "PerturbationKind",
    "PerturbationSpec",
    "QuestionRecord",
    "ResolutionMode",
    "ViewPlan",
    "apply_perturbation",
    "build_view_plan",
    "clean_accuracy",
    "compute_report",
    "consistency_score",
    "decode_png",
    "derive_stream",
    "encode_png",
    "normalize_answer",
    "prs",
    "run_multi_view",
    "vdc",
]
