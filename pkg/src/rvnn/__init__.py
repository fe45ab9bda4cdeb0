"""Recognition-verification image classification with non-differentiable queries."""

from .autodiff import Tape, Tensor, backward, zero_grads
from .gumbel import TemperatureSchedule, gumbel_max, gumbel_softmax, straight_through
from .model import BaselineCnnClassifier, RvnnClassifier
from .network import BaselineCnn, RvnnConfig, RvnnNetwork
from .support import SupportStore

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "zero_grads",
    "TemperatureSchedule",
    "gumbel_max",
    "gumbel_softmax",
    "straight_through",
    "BaselineCnnClassifier",
    "RvnnClassifier",
    "BaselineCnn",
    "RvnnConfig",
    "RvnnNetwork",
    "SupportStore",
    "__version__",
]
