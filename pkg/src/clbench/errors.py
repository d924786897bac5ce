"""Exception hierarchy shared by every module."""


class ClbenchError(Exception):
    pass


class StructuralError(ClbenchError, ValueError):
    """Shapes or lengths that do not line up."""


class ConfigError(ClbenchError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(ClbenchError, ArithmeticError):
    pass


class ProtocolError(ClbenchError, RuntimeError):
    pass


class FormatError(ClbenchError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
