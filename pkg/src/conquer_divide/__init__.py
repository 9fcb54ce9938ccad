"""Two-stage multi-source pre-training: dual-encoder vision-language
alignment plus a gated mixture of query networks."""

from .config import (
    AslConfig,
    DatasetConfig,
    LossConfig,
    ModelConfig,
    RunConfig,
    SourceProfile,
    SourceStyle,
    TrainConfig,
    default_dataset_config,
    default_run_config,
)
from .data import (
    SynthDataset,
    apply_source_style,
    fourier_amplitude_mixup,
    generate_dataset,
    make_text,
)
from .estimator import MixtureQueryClassifier
from .evaluation import evaluate_model, grounding_heatmap, zero_shot_evaluate
from .losses import bcl_loss, conquer_loss, divide_loss, masked_asl_loss, scl_loss
from .metrics import (
    MetricReport,
    accuracy_at_threshold,
    average_precision,
    compute_report,
    macro_auc,
    max_f1_threshold,
    roc_auc,
)
from .model import MultiQueryModel, ensemble_scores
from .training import (
    ablation_run,
    cosine_lr,
    train_conquer,
    train_divide,
)

__version__ = "0.1.0"

__all__ = [
    "AslConfig",
    "DatasetConfig",
    "LossConfig",
    "MetricReport",
    "MixtureQueryClassifier",
    "ModelConfig",
    "MultiQueryModel",
    "RunConfig",
    "SourceProfile",
    "SourceStyle",
    "SynthDataset",
    "TrainConfig",
    "ablation_run",
    "accuracy_at_threshold",
    "apply_source_style",
    "average_precision",
    "bcl_loss",
    "compute_report",
    "conquer_loss",
    "cosine_lr",
    "default_dataset_config",
    "default_run_config",
    "divide_loss",
    "ensemble_scores",
    "evaluate_model",
    "fourier_amplitude_mixup",
    "generate_dataset",
    "grounding_heatmap",
    "macro_auc",
    "make_text",
    "masked_asl_loss",
    "max_f1_threshold",
    "roc_auc",
    "scl_loss",
    "train_conquer",
    "train_divide",
    "zero_shot_evaluate",
]
