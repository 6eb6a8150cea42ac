"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 2,
numeric failures exit 3, file I/O and format problems exit 4.
"""


class TiMaeError(Exception):
    exit_code = 1


class ConfigError(TiMaeError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    """Operand shapes are incompatible."""


class ParameterError(ConfigError):
    """A scalar/enum parameter is outside its allowed range."""


class ContractError(TiMaeError, RuntimeError):
    exit_code = 2


class NumericError(TiMaeError, FloatingPointError):
    exit_code = 3


class ParseError(TiMaeError, ValueError):
    exit_code = 4


class FormatError(TiMaeError, ValueError):
    exit_code = 4


class VersionError(FormatError):
    """Checkpoint was written for a different model configuration."""


class InvariantViolation(TiMaeError, AssertionError):
    exit_code = 3
