"""
Exception hierarchy shared by every module.
"""


class ConformerRError(Exception):
    """Base class for all errors raised by the kit."""


class DimensionError(ConformerRError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(ConformerRError, ArithmeticError):
    """A value is outside an operation's numeric domain."""


class FormatError(ConformerRError, ValueError):
    """An on-disk file does not match the expected format."""


class VocabularyError(ConformerRError, ValueError):
    """A token id or character is not in the vocabulary."""


class InfeasibleAlignmentError(ConformerRError, ValueError):
    """A CTC target cannot be aligned to the available frames."""


class ScoringError(ConformerRError, ZeroDivisionError):
    """An error rate is undefined (empty reference)."""


class NonFiniteGradientError(ConformerRError, ArithmeticError):
    """A gradient contains NaN or infinity."""

    def __init__(self, parameter: str):
        super().__init__(f"non-finite gradient in parameter '{parameter}'")
        self.parameter = parameter


class DataError(ConformerRError):
    """Input data (manifests, transcripts, audio) is unusable."""


class ConfigMismatchError(ConformerRError):
    """A checkpoint was produced under a different run configuration."""

    def __init__(self, message: str, diff: list):
        super().__init__(message + "".join(f"\n  {line}" for line in diff))
        self.diff = diff
