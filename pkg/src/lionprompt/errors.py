"""Exception taxonomy shared across the package."""


class LionPromptError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(LionPromptError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class EvaluationError(LionPromptError, RuntimeError):
    """A numeric evaluation produced non-finite values."""


class DivergenceError(LionPromptError, RuntimeError):
    """A fixed-point solve diverged or failed to converge.

    Carries the last residual norm when one is available.
    """

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class StateError(LionPromptError, RuntimeError):
    """An operation was called in an invalid state (e.g. missing gradients)."""


class ConfigError(LionPromptError, ValueError):
    """A config file or flag value is invalid; the message names the key."""


class MissingArtifactError(LionPromptError, FileNotFoundError):
    """A required input file (checkpoint, run report) does not exist."""


class CheckpointError(LionPromptError, ValueError):
    """A checkpoint file is malformed or has an unsupported version."""


class SetupError(LionPromptError, RuntimeError):
    """An experiment precondition could not be established."""
