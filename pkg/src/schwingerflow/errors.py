"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible (broadcast, axis, or dimension mismatch)."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class SingularMatrixError(RuntimeError):
    """A pivot underflowed the configured threshold during LU factorization."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (backward on detached or non-scalar tensors)."""


class ConfigError(ValueError):
    """Malformed, unknown, or missing run-configuration key."""


class CheckpointError(RuntimeError):
    """Unreadable, version-mismatched, or inconsistent checkpoint."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered during training."""
