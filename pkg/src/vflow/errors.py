"""Exception types shared across the package."""

from __future__ import annotations


class VFlowError(Exception):
    """Base class for all package errors."""


class ShapeError(VFlowError, ValueError):
    """Operands are not conformable for the requested operation."""


class DomainError(VFlowError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(VFlowError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(VFlowError, ValueError):
    """A configuration value violates a documented constraint."""


class SequenceLengthError(VFlowError, ValueError):
    """A token sequence does not fit into the model context."""


class VocabularyError(VFlowError, KeyError):
    """A word is missing from a prompt vocabulary."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class NumericalError(VFlowError, FloatingPointError):
    """A computation produced NaN or infinite values."""


class GenerationError(NumericalError):
    """Autoregressive generation diverged."""


class StiffnessError(VFlowError, RuntimeError):
    """An ODE solve exhausted its evaluation budget."""


class RegistryError(VFlowError, KeyError):
    """Unknown task name."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class CompatibilityError(VFlowError, ValueError):
    """Checkpoint and configuration do not belong together."""


class CheckpointError(VFlowError, ValueError):
    """A checkpoint file is malformed."""


class TrainingDivergedError(NumericalError):
    """Training produced a non-finite loss; carries the last good parameters."""

    def __init__(self, message: str, step: int, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good
