"""Exception hierarchy shared by all modules.

The CLI maps :class:`ContractError` subclasses to exit code 1 and
:class:`InputError` / :class:`OSError` to exit code 2.
"""


class DereverbError(Exception):
    """Base class for every error raised by this package."""


class ContractError(DereverbError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    pass


class DomainError(ContractError):
    pass


class ConfigError(ContractError):
    pass


class InfeasibleError(ContractError):
    """Requested room acoustics cannot be realised (e.g. absorption >= 1)."""


class GeometryError(ContractError):
    pass


class NumericError(ContractError):
    pass


class UnsupportedError(ContractError):
    pass


class InputError(DereverbError):
    """Missing or unreadable input files."""
