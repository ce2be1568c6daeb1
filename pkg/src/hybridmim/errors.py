"""Exception hierarchy shared by every subsystem."""


class HybridMIMError(Exception):
    """Base class for all package errors."""


class ConfigError(HybridMIMError, ValueError):
    """An invalid configuration value or combination."""


class DimensionError(HybridMIMError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HybridMIMError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(HybridMIMError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class TapeError(HybridMIMError, RuntimeError):
    """Misuse of a differentiation tape (e.g. a second backward pass)."""


class StateError(HybridMIMError, RuntimeError):
    """An object is not in the state required by the operation."""


class FormatError(HybridMIMError, ValueError):
    """A binary file does not match its documented layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(HybridMIMError, ValueError):
    """A checkpoint cannot be loaded into the requested model."""


class GenerationError(HybridMIMError, RuntimeError):
    """A procedural generator could not satisfy its constraints."""


class MetricUndefinedError(HybridMIMError, ValueError):
    """A metric is mathematically undefined for the given inputs."""
