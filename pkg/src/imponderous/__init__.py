"""Imponderous Net: a 1.45M-parameter facial expression recognition network.

Built on a small numpy autograd core whose hot loops are numba kernels
(``IMPONDEROUS_BACKEND=numpy`` selects the pure-numpy fallbacks).
"""
from .kernels import BACKEND
from .model import (
    ForwardOutput,
    ModelConfig,
    build,
    count_params,
    forward,
    forward_base,
    partition,
    predict,
    predict_batch,
)
from .tensor import InvalidArgumentError, Tape, Variable, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ForwardOutput",
    "InvalidArgumentError",
    "ModelConfig",
    "Tape",
    "Variable",
    "backward",
    "build",
    "count_params",
    "forward",
    "forward_base",
    "grad_check",
    "partition",
    "predict",
    "predict_batch",
]
