"""Mean-teacher detection transformer with adversarial domain alignment, at desk scale."""

__version__ = "0.1.0"

from .data import AnnotationSet, DetectionDataset, Domain, ImageBatch, ShiftConfig, generate_synthetic_dataset
from .detector import Detector, DetectorConfig, detection_loss, hungarian_match
from .evaluation import EvalResult, evaluate_detector, map50
from .mean_teacher import MeanTeacherPair, PseudoLabelSet, generate_pseudo_labels
from .training import TrainConfig, burn_in, init_transfer, load_config, transfer_train

__all__ = [
    "AnnotationSet", "DetectionDataset", "Domain", "ImageBatch", "ShiftConfig", "generate_synthetic_dataset",
    "Detector", "DetectorConfig", "detection_loss", "hungarian_match",
    "EvalResult", "evaluate_detector", "map50",
    "MeanTeacherPair", "PseudoLabelSet", "generate_pseudo_labels",
    "TrainConfig", "burn_in", "init_transfer", "load_config", "transfer_train",
]
