"""Exception hierarchy. Each class maps to one CLI exit code."""


class HeaderGanError(Exception):
    exit_code = 1


class ConfigError(HeaderGanError, ValueError):
    exit_code = 1


class TraceFormatError(HeaderGanError, ValueError):
    """Input data could not be parsed or violates a field invariant."""

    exit_code = 2


class ArtifactError(HeaderGanError):
    """A stage artifact is missing, malformed, or stale."""

    exit_code = 2


class ShapeError(HeaderGanError, ValueError):
    exit_code = 2


class NumericError(HeaderGanError, ArithmeticError):
    """A loss or parameter became non-finite."""

    exit_code = 3
