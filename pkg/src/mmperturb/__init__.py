"""Mix-and-match perturbation for stochastic motion prediction, on a small numpy autodiff engine."""

from .mixing import FusionMode, IndexSet, resample, sample_indices
from .model import MixMatchModel, ModelConfig
from .training import TrainingConfig, train

__version__ = "0.1.0"

__all__ = [
    "FusionMode",
    "IndexSet",
    "MixMatchModel",
    "ModelConfig",
    "TrainingConfig",
    "resample",
    "sample_indices",
    "train",
]
