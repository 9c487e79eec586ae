"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration (dataset, plan, split or regime)."""


class DegenerateEmbeddingError(ArithmeticError):
    """A vector to be normalized has (numerically) zero length."""


class SamplingError(RuntimeError):
    """Edge sampling was requested from a graph without edges."""


class BatchLossError(RuntimeError):
    """Every pair in a contrastive batch had an empty denominator."""


class TrainingError(RuntimeError):
    """Training failed: non-finite values, or a failure wrapped with its run context."""


class UsageError(RuntimeError):
    """An API was called out of order, e.g. backward before forward."""
