"""Dual attentive sequential learning for cross-domain click-through prediction."""

from .autodiff import Adam, Tape, Tensor
from .data import DomainPairDataset, SynthConfig, build_examples, synthetic_dataset
from .evaluation import MetricsReport, ablation_suite, cross_validate
from .model import VARIANTS, AblationConfig, DaslModel, ModelConfig
from .trainer import TrainConfig, train

__all__ = [
    "Adam", "Tape", "Tensor", "DomainPairDataset", "SynthConfig", "build_examples",
    "synthetic_dataset", "MetricsReport", "ablation_suite", "cross_validate", "VARIANTS",
    "AblationConfig", "DaslModel", "ModelConfig", "TrainConfig", "train",
]

__version__ = "0.1.0"
