"""Visual question answering with question self-attention and bilinear glimpses
over image features and caption-derived semantic information."""

__version__ = "0.1.0"

from .data import SyntheticConfig, VqaExample, generate_split, load_dataset, load_split, save_dataset, scale_split
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DegenerateMaskError,
    DimensionError,
    NumericError,
    VocabularyError,
    VqaCoinError,
)
from .estimator import SemanticInfoExtractor, VqaCoinClassifier
from .evaluation import EvalReport, ScalingReport, dump_attention, evaluate, export_results, scaling_experiment, soft_accuracy
from .model import ModelConfig, VqaCoinModel, load_checkpoint, save_checkpoint
from .textprep import semantic_info
from .train import Adamax, TrainSchedule, lr_at_epoch, train_loop

__all__ = [
    "Adamax",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DegenerateMaskError",
    "DimensionError",
    "EvalReport",
    "ModelConfig",
    "NumericError",
    "ScalingReport",
    "SemanticInfoExtractor",
    "SyntheticConfig",
    "TrainSchedule",
    "VocabularyError",
    "VqaCoinClassifier",
    "VqaCoinError",
    "VqaCoinModel",
    "VqaExample",
    "dump_attention",
    "evaluate",
    "export_results",
    "generate_split",
    "load_checkpoint",
    "load_dataset",
    "load_split",
    "lr_at_epoch",
    "save_checkpoint",
    "save_dataset",
    "scale_split",
    "scaling_experiment",
    "semantic_info",
    "soft_accuracy",
    "train_loop",
]
