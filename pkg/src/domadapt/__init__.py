"""Adversarial domain adaptation for high-dimensional tabular classification."""

__version__ = "0.1.0"

from .adaptation import TrainConfig, TrainHistory, TrainingDiverged, fit
from .autodiff import NumericError
from .bec import ComBat, LimmaBatchRemover, train_no_adaptation, train_target_only
from .data import LabeledDataset, SyntheticConfig, generate_synthetic, load_matrix
from .estimators import DomainAdaptationClassifier
from .harness import MethodId, SweepResult, run_full_data, run_source_sweep, run_target_sweep, write_report
from .models import AdaptationModel, build_model, load_checkpoint, save_checkpoint

__all__ = [
    "__version__",
    "TrainConfig",
    "TrainHistory",
    "TrainingDiverged",
    "fit",
    "NumericError",
    "ComBat",
    "LimmaBatchRemover",
    "train_no_adaptation",
    "train_target_only",
    "LabeledDataset",
    "SyntheticConfig",
    "generate_synthetic",
    "load_matrix",
    "DomainAdaptationClassifier",
    "MethodId",
    "SweepResult",
    "run_full_data",
    "run_source_sweep",
    "run_target_sweep",
    "write_report",
    "AdaptationModel",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
]
