"""Exception types raised across the package."""


class LFMMError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(LFMMError, ValueError):
    pass


class OutOfDomainError(InvalidArgumentError):
    """Raised when a spline is evaluated outside its knot grid."""


class InconsistentStateError(LFMMError, RuntimeError):
    pass


class DatasetParseError(LFMMError, ValueError):
    """Malformed input file; ``line`` is the 1-based line number when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class SamplerError(LFMMError, RuntimeError):
    """A chain failed; ``iteration`` is the 1-based iteration that raised."""

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        prefix = f"iteration {iteration}: " if iteration is not None else ""
        super().__init__(prefix + message)
