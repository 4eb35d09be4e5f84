"""Domain-specific neuron masks for multi-source domain generalization."""

from .data import DomainDataset, DomainSuite, SyntheticSpec, bayes_oracle_accuracy, generate
from .evaluator import evaluate, iou_report, lambda_sweep, specialization_table
from .masks import MaskBank, siou_pair, siou_total
from .trainer import DESK_PROFILE, Checkpoint, TrainConfig, TrainReport, train

__all__ = [
    "DESK_PROFILE", "Checkpoint", "DomainDataset", "DomainSuite", "MaskBank", "SyntheticSpec", "TrainConfig",
    "TrainReport", "bayes_oracle_accuracy", "evaluate", "generate", "iou_report", "lambda_sweep",
    "siou_pair", "siou_total", "specialization_table", "train",
]

__version__ = "0.1.0"
