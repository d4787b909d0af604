"""Exception hierarchy shared across the package."""


class PosteriorShieldError(Exception):
    """Base class for every error raised by this package."""


class DomainError(PosteriorShieldError, ValueError):
    """A scalar argument lies outside the domain of a function."""


class DegenerateError(PosteriorShieldError, ValueError):
    """A perturbed score vector has no positive mass left to normalize."""


class ShapeError(PosteriorShieldError, ValueError):
    """Array dimensions do not agree."""


class ParamError(PosteriorShieldError, ValueError):
    """An operation parameter is out of range."""


class ConfigError(PosteriorShieldError, ValueError):
    """Invalid training or experiment configuration.

    ``key`` holds the dotted path of the offending entry when known.
    """

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class UnknownKeyError(ConfigError):
    """A config file carries a key the schema does not know (strict mode)."""


class BudgetError(PosteriorShieldError, ValueError):
    """More queries requested than the pool holds."""


class InsufficientSamples(PosteriorShieldError, ValueError):
    """Too few latency samples to summarize."""


class EmptyReport(PosteriorShieldError, ValueError):
    """A report holds no points to export."""


class ParseError(PosteriorShieldError, ValueError):
    """Malformed input file; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(PosteriorShieldError, ValueError):
    """Input file does not follow the expected column schema."""


class IoError(PosteriorShieldError, OSError):
    """Input file missing or unreadable."""
