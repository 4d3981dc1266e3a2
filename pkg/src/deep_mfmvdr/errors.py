"""Exception types shared across the package."""


class DeepMfmvdrError(Exception):
    """Base class for all package errors."""


class WavFormatError(DeepMfmvdrError, ValueError):
    """Unsupported or malformed WAV file."""


class DegeneratePowerError(DeepMfmvdrError, ArithmeticError):
    """A leading diagonal entry e^T Phi e fell below the division guard."""


class SingularSystemError(DeepMfmvdrError, ArithmeticError):
    """The regularized noise correlation matrix is numerically singular."""


class ModelFormatError(DeepMfmvdrError, ValueError):
    """Weight file could not be parsed."""


class ChecksumError(ModelFormatError):
    pass


class ShapeMismatchError(ModelFormatError):
    pass


class NonFiniteLossError(DeepMfmvdrError, FloatingPointError):
    """Training produced a NaN/Inf loss."""

    def __init__(self, message, utterance_id=None):
        super().__init__(message)
        self.utterance_id = utterance_id
