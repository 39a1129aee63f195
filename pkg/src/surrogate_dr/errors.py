"""Exception hierarchy shared by the library and the command-line tool."""


class SdrError(Exception):
    """Base class for every error raised by surrogate_dr."""

    @property
    def name(self) -> str:
        return type(self).__name__


class InvalidInput(SdrError, ValueError):
    pass


class SingularMatrix(SdrError):
    pass


class RankDeficient(SdrError):
    pass


class InsufficientData(SdrError, ValueError):
    pass


class InvalidEstimates(SdrError, ValueError):
    pass


class DegenerateSlicing(SdrError):
    pass


class DegenerateDirection(SdrError):
    pass


class NoPairsWithinCut(SdrError):
    pass


class InvalidDesign(SdrError, ValueError):
    pass


class ParseError(SdrError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(SdrError):
    pass


class ConfigError(SdrError, ValueError):
    pass
