"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor ranks or dimensions do not line up for an operation."""


class ConfigError(ValueError):
    """A task, spec, or configuration violates a precondition."""


class ParseError(ValueError):
    """A domain file is malformed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")
