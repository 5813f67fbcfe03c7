"""Exception types shared across the package."""


class QexError(Exception):
    """Base class for package errors."""


class ConfigError(QexError, ValueError):
    pass


class ParseError(QexError, ValueError):
    """Malformed persisted file. ``line`` is 1-based, or None for whole-file problems."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class SchemaError(ParseError):
    pass


class ContractError(QexError, RuntimeError):
    pass


class InputError(QexError, ValueError):
    pass


class NumericError(QexError, FloatingPointError):
    def __init__(self, message, payload=None):
        self.payload = payload
        super().__init__(message)


class CheckpointError(QexError, ValueError):
    pass
