"""Small float64 tensor engine: tape autodiff, MLPs, Adam, checkpoints."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .nn import ACTIVATIONS, Mlp, forward
from .optim import Adam, NonFiniteGradientError
from .tensor import Tape, Tensor, as_tensor, backward

__all__ = [
    "ACTIVATIONS",
    "Adam",
    "Checkpoint",
    "Mlp",
    "NonFiniteGradientError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
]
