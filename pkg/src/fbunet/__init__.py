"""Feedback U-Net with convolutional LSTM, built on a small numpy autograd engine."""

from .autograd import Parameter, Precision, Tensor, backward, no_grad
from .errors import ConfigError, ContractError, DataError, FormatError, ShapeError
from .models import ForwardOutput, Model, ModelConfig, build_model, first_layer_activation_sum

__version__ = "0.1.0"

__all__ = [
    "Parameter", "Precision", "Tensor", "backward", "no_grad",
    "ConfigError", "ContractError", "DataError", "FormatError", "ShapeError",
    "ForwardOutput", "Model", "ModelConfig", "build_model", "first_layer_activation_sum",
]
