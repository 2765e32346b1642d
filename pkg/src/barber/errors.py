"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class InputError(ValueError):
    pass


class FormatError(InputError):
    """Malformed serialized data. Carries the byte offset (or line number) of the defect."""

    def __init__(self, message, offset=None, line=None):
        where = ""
        if offset is not None:
            where = f" (at byte offset {offset})"
        elif line is not None:
            where = f" (at line {line})"
        super().__init__(message + where)
        self.offset = offset
        self.line = line


class NumericError(ArithmeticError):
    pass


class ConsistencyError(RuntimeError):
    """Internal invariant violated, e.g. a rebuild pair pointing at the wrong mask state."""
