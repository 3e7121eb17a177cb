"""
Exception hierarchy shared by the library and the CLI.

DataError subclasses describe bad inputs on disk and map to exit code 2;
CheckFailure maps to exit code 3. Shape and configuration errors are also
ValueErrors so callers that only know the builtin type still catch them.
"""


class RangeSegError(Exception):
    """Root of all errors raised by rangeseg."""


class DataError(RangeSegError):
    """Input data is missing, malformed or inconsistent."""


class MalformedFileError(DataError):
    pass


class CalibrationError(DataError):
    pass


class ParseError(DataError):
    pass


class PairingError(DataError):
    """Two inputs that must describe the same scan disagree in size."""


class MappingError(DataError):
    def __init__(self, unmapped_ids):
        self.unmapped_ids = sorted(int(i) for i in unmapped_ids)
        super().__init__(f'Unmapped raw label ids: {self.unmapped_ids}')


class ProtocolError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ShapeError(RangeSegError, ValueError):
    pass


class ConfigurationError(RangeSegError, ValueError):
    pass


class NumericError(RangeSegError, ArithmeticError):
    pass


class UndefinedLossError(RangeSegError):
    pass


class UndefinedMetricError(RangeSegError):
    pass


class ConsistencyError(RangeSegError):
    """An internal invariant that should be impossible to break was broken."""


class CheckFailure(RangeSegError):
    """A verification run finished but did not meet its tolerance."""
