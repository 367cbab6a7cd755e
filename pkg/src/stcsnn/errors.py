"""Exception hierarchy shared by the library and the CLI.

The CLI maps each family onto an exit code: configuration problems exit 1,
data problems exit 2 and numerical failures exit 3.
"""


class StcsnnError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(StcsnnError, ValueError):
    """Invalid architecture string, run configuration or structural invariant."""


class DataError(StcsnnError, ValueError):
    """Input data could not be decoded or violates its format."""


class FormatError(DataError):
    """A byte stream does not have the expected framing."""


class CorruptRecordError(DataError):
    """A record decoded to values outside the sensor geometry."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ParseError(DataError):
    """A text record could not be parsed."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class EventValueError(DataError):
    """A parsed event field has an illegal value (e.g. polarity not in {0, 1})."""


class ShapeError(StcsnnError, ValueError):
    """Operand shapes are incompatible."""


class NumericalError(StcsnnError, ArithmeticError):
    """Non-finite values or a failed tolerance check."""
