"""Feature-level egocentric action anticipation toolkit.

Causal-decoder anticipation models, gap-position knowledge distillation,
a verb-noun relation module, deterministic training, and class-mean top-5
recall evaluation with soft-label ensembling.
"""

from .data import (
    ActionLabel,
    AnnotationRow,
    AnticipationInstance,
    Clip,
    ClipTimeline,
    TaskConfig,
    build_timeline,
    full_sequence,
    load_annotations,
    make_instance,
    propagate_labels,
)
from .distill import DistillConfig, SoftLabelSet, average_soft_labels, distillation_loss
from .evaluation import (
    ActionMapping,
    RecallReport,
    ScoreFile,
    SplitSpec,
    compose_action_scores,
    ensemble,
    evaluate,
    mean_top5_recall,
)
from .model import AnticipationModel, LogitBundle, ModelConfig, count_parameters
from .synthetic import SyntheticGrammarConfig, generate_synthetic
from .training import TrainConfig, lr_at, smoothed_cross_entropy
from .vnrm import VerbNounRelationModel, VnrmConfig

__version__ = "0.1.0"

__all__ = [
    "ActionLabel",
    "ActionMapping",
    "AnnotationRow",
    "AnticipationInstance",
    "AnticipationModel",
    "Clip",
    "ClipTimeline",
    "DistillConfig",
    "LogitBundle",
    "ModelConfig",
    "RecallReport",
    "ScoreFile",
    "SoftLabelSet",
    "SplitSpec",
    "SyntheticGrammarConfig",
    "TaskConfig",
    "TrainConfig",
    "VerbNounRelationModel",
    "VnrmConfig",
    "average_soft_labels",
    "build_timeline",
    "compose_action_scores",
    "count_parameters",
    "distillation_loss",
    "ensemble",
    "evaluate",
    "full_sequence",
    "generate_synthetic",
    "load_annotations",
    "lr_at",
    "make_instance",
    "mean_top5_recall",
    "propagate_labels",
    "smoothed_cross_entropy",
]
