"""Exception hierarchy. Each top-level class maps to one CLI exit code."""


class HcfError(Exception):
    exit_code = 1


class ConfigError(HcfError):
    exit_code = 1


class DataError(HcfError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyLogError(DataError):
    pass


class UnknownEntityError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DivergenceError(HcfError):
    exit_code = 3
