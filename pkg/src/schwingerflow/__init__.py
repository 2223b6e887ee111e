"""Normalizing-flow sampler for the 2D Schwinger model.

Reverse-mode autodiff engine with graph instrumentation, gauge-equivariant
circular-spline flows, reparameterization and score-function loss
constructions, and a Metropolized independent sampler.
"""

from . import tensor
from .errors import (
    CheckpointError,
    ConfigError,
    DomainError,
    GraphError,
    ShapeError,
    SingularMatrixError,
    TrainingDiverged,
)
from .tensor import Tensor, backward, grad_enabled, graph_stats, no_grad

__all__ = [
    "tensor",
    "Tensor",
    "backward",
    "grad_enabled",
    "graph_stats",
    "no_grad",
    "ShapeError",
    "DomainError",
    "GraphError",
    "SingularMatrixError",
    "ConfigError",
    "CheckpointError",
    "TrainingDiverged",
]
