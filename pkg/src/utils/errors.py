"""
Exception hierarchy for the noisy EK-FAC toolkit.
"""


class NoisyEKFACError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NoisyEKFACError, ValueError):
    """Operand dimensions do not conform."""


class NonFiniteError(NoisyEKFACError, ValueError):
    """An input or result contains NaN or Inf."""


class SizeGuardError(NoisyEKFACError, ValueError):
    """A dense oracle was asked to materialize a matrix that is too large."""


class StaleCacheError(NoisyEKFACError, RuntimeError):
    """Layer caches were read before the current forward/backward pass refreshed them."""


class StaleEigenbasisError(NoisyEKFACError, RuntimeError):
    """The Kronecker eigenbasis is missing or older than allowed."""


class DatasetError(NoisyEKFACError, ValueError):
    """A dataset file could not be parsed or failed validation."""


class ConfigError(NoisyEKFACError, ValueError):
    """A run configuration failed schema validation."""


class TrainingDivergedError(NoisyEKFACError, RuntimeError):
    """An update stayed non-finite after the rejected-step retry."""
