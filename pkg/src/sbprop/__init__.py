"""Stochastic backpropagation on a self-contained autodiff engine.

Training keeps every forward path but computes gradients only through a
sampled subset of nodes per wrapped layer, which removes the need to cache
activations for the dropped backward paths.  The package provides the tape
engine with exact activation-memory and op-count instrumentation, the node
samplers and wrapped-op machinery, two desk-scale model families, analytical
cost predictors plus similarity diagnostics, and a CLI experiment harness.
"""

from . import analysis, autograd, backend, models, sbp, tensor
from .backend import ACTIVE_BACKEND
from .tensor import Rng, Tensor

__version__ = "0.1.0"

__all__ = [
    "analysis",
    "autograd",
    "backend",
    "models",
    "sbp",
    "tensor",
    "Tensor",
    "Rng",
    "ACTIVE_BACKEND",
    "__version__",
]
