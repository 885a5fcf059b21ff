"""Exception types and process exit codes."""


class QagrelError(Exception):
    """Base class for all package errors."""


class ShapeError(QagrelError):
    """An array does not have the shape a layer or network requires."""


class ConfigError(QagrelError):
    """Invalid experiment configuration or config file."""


class StaleTraceError(QagrelError):
    """A trace is used with a network that was mutated after the trace was made."""


class NumericalError(QagrelError):
    """Training produced non-finite values (overflow / divergence)."""


class DataFormatError(QagrelError):
    """Base class for dataset file problems."""


class BadMagicError(DataFormatError):
    """IDX file starts with an unexpected magic number."""


class TruncatedFileError(DataFormatError):
    """File ends before the byte count promised by its header."""


class CountMismatchError(DataFormatError):
    """Image file and label file disagree on the number of samples."""


class FramingError(DataFormatError):
    """Binary record stream length is not a whole number of records."""


class LabelRangeError(DataFormatError):
    """A label byte is outside the valid class range."""


class ChecksumMismatchError(DataFormatError):
    """A fetched file's SHA-256 digest does not match the expected value."""


# CLI exit codes (0 = success)
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
