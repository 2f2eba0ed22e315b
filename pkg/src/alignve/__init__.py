"""Alignment-matrix visual entailment with a small numpy autodiff engine."""

from .data import LABELS, Dataset, Example, ToyConfig, generate_toy_dataset, load_dataset
from .encoder import EncoderConfig
from .model import AlignVE, ModelConfig
from .tensor import ParamStore, Tensor, backward, finite_difference_check
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "LABELS", "AlignVE", "Dataset", "EncoderConfig", "Example", "ModelConfig", "ParamStore",
    "Tensor", "ToyConfig", "TrainConfig", "backward", "evaluate", "finite_difference_check",
    "generate_toy_dataset", "load_dataset", "train",
]
