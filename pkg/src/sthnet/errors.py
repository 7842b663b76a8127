"""Exception hierarchy shared by all modules.

The CLI maps these onto its exit-code contract: config errors -> 2,
file/data errors -> 3, shape or consistency errors -> 4.
"""


class SthError(Exception):
    """Base class for all package errors."""


class ArgumentError(SthError):
    """Invalid argument value (e.g. empty range, bad mode string)."""


class ShapeError(SthError):
    """Tensor shape or dimension mismatch."""


class LayoutError(SthError):
    """Hybrid-kernel layout constraint violated (divisibility, spans)."""


class ConfigError(SthError):
    """Invalid configuration value or file.

    ``line`` is the 1-based line number in the config file when the error
    originates from parsing, else None.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedConfigError(ConfigError):
    """Operation requested on a configuration that does not support it."""


class DataFormatError(SthError):
    """Malformed data file."""


class MissingFileError(DataFormatError):
    """A referenced file does not exist."""


class BadMagicError(DataFormatError):
    """Tensor file does not start with the expected magic bytes."""


class TruncatedFileError(DataFormatError):
    """Tensor file ends before the declared payload.

    Carries ``offset``, the byte offset at which the file ends.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (file ends at byte {offset})")
        self.offset = offset


class DimOverflowError(DataFormatError):
    """Tensor file declares dimensions beyond the supported range."""
