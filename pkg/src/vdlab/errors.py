"""Error types shared across the package.

Everything derives from VdlabError so callers can catch the whole family;
the subclasses distinguish contract violations that tests assert on.
"""


class VdlabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VdlabError):
    """Operand shapes are incompatible or malformed."""


class ParameterError(VdlabError):
    """A numeric parameter is outside its legal domain."""


class SizeError(VdlabError):
    """A size/extent is non-positive or inconsistent with a payload."""


class FormatError(VdlabError):
    """A serialized container is malformed (bad magic, version, truncation)."""


class NumericError(VdlabError):
    """A computation produced non-finite values or a matrix left its cone."""


class StateError(VdlabError):
    """An object is not in a state that permits the requested operation."""


class ConfigError(VdlabError):
    """A configuration combination is invalid."""


class DegenerateInputError(VdlabError):
    """An input has no usable signal (e.g. zero variance where a
    correlation is requested)."""


class ParseError(VdlabError):
    """A config or index file failed to parse.

    Carries the 1-based line number when one is known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
