"""Prompt-collaboration vision transformer with generalized zero-shot evaluation.

Layers small learnable visual and semantic prompt tokens into a compact ViT,
fuses them with patch and attribute evidence at the input and in the deep
layers, trains with a prototype-anchored composite loss, and evaluates with a
calibrated seen/unseen split. Everything runs on a float64 autodiff kernel
small enough to verify exhaustively against finite differences.
"""

from .config import RunConfig
from .data import GzslDataset, load_attribute_vectors, synth_gzsl_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    NumericError,
    ShapeError,
    TrainingAbort,
)
from .evaluation import calibrated_predict, evaluate, harmonic_mean, sweep_tau
from .fusion import forward_vspcn
from .model import ModelParams, init_model
from .tensor import Tensor, backward, fd_gradient, gradient_check, no_grad
from .training import ablate, checkpoint_load, checkpoint_save, restore_model, train

__version__ = "0.1.0"
