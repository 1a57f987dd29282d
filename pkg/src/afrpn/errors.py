"""Exception types shared across the package."""


class DegenerateQuad(ValueError):
    """A quadrilateral with (near) zero area or crossing edges."""

    def __init__(self, msg="degenerate quadrilateral", line=None):
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg)
        self.line = line


class InvalidFactor(ValueError):
    pass


class InvalidNorm(ValueError):
    pass


class ShapeError(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line, msg):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class FormatError(ValueError):
    pass


class CompatError(ValueError):
    pass


class JoinError(ValueError):
    pass


class NumericalError(RuntimeError):
    """Raised when a training loss goes non-finite; carries the last log record."""

    def __init__(self, msg, record=None):
        super().__init__(msg)
        self.record = record


class UsageError(ValueError):
    """Bad command-line usage or an invalid configuration file."""
