"""Exception types shared across the package."""


class NPXError(Exception):
    """Base class for all package errors."""


class InputError(NPXError):
    """A problem with an input file. Carries the path and 1-based line number."""

    def __init__(self, message, path=None, line=None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if self.path is not None:
            where = f"{self.path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.message = message


class DuplicateKey(InputError):
    pass


class MalformedValue(InputError):
    pass


class MalformedLine(InputError):
    pass


class InvalidInterval(InputError):
    pass


class EmptyCohort(NPXError):
    pass


class ShapeError(NPXError):
    pass


class DomainError(NPXError):
    pass


class NumericError(NPXError):
    pass


class ConfigError(NPXError):
    pass


class GroupEmpty(NPXError):
    pass


class IoError(NPXError):
    pass
