"""Exception types shared across the toolkit."""


class SatlabError(Exception):
    """Base class for all satlab errors."""


class ShapeError(SatlabError):
    """Tensor shapes do not match what an operation requires."""


class NumericError(SatlabError):
    """A computation produced non-finite values."""


class ConfigurationError(SatlabError):
    """An option, name, or config field is invalid or unsupported."""


class FormatError(SatlabError):
    """A file does not conform to its declared binary/text format."""


class DataError(SatlabError):
    """File parsed but its contents are out of the legal domain."""


class PreconditionError(SatlabError):
    """An operation's documented precondition does not hold."""


class TrainingDiverged(NumericError):
    """Training loss became non-finite; carries step diagnostics."""
