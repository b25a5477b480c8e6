"""Exception hierarchy.

Every error raised on purpose by the package derives from ``InstOccError`` so
the CLI can map failures to exit codes without catching unrelated bugs.
"""


class InstOccError(Exception):
    """Base class for all package errors."""


class InvariantViolation(InstOccError, ValueError):
    """A value breaks a domain invariant. The message names the field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class OutOfRange(InstOccError, IndexError):
    pass


class DegenerateScale(InvariantViolation):
    pass


class GridMismatch(InstOccError, ValueError):
    pass


class RefusesLargeGrid(InstOccError, ValueError):
    pass


class EmptyGroundTruth(InstOccError, ValueError):
    pass


class NonFiniteCost(InstOccError, ValueError):
    pass


class ClassOutOfRange(InstOccError, IndexError):
    pass


class VoxelEnumerationMismatch(InstOccError, ValueError):
    pass


class ConfigInvalid(InstOccError, ValueError):
    pass


class FormatError(InstOccError):
    """Malformed or unsupported file content."""


class ParseError(FormatError):
    def __init__(self, message, line=None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class BadMagic(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class DimsInconsistent(FormatError):
    pass


class IndicesNotAscending(FormatError):
    pass
