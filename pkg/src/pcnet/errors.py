"""Exception hierarchy shared by every pcnet module.

The CLI maps each category to its own exit code, so raise the most specific
class that applies.
"""

from __future__ import annotations


class PcnetError(Exception):
    """Base class for all errors raised by pcnet."""

    exit_code = 1


class UsageError(PcnetError, ValueError):
    """Malformed command line or experiment config."""

    exit_code = 2


class DimensionError(PcnetError, ValueError):
    exit_code = 3


class ValidationError(PcnetError, ValueError):
    exit_code = 4


class ContractError(PcnetError, RuntimeError):
    exit_code = 5


class NumericalError(PcnetError, ArithmeticError):
    exit_code = 6


class UndefinedCorrelationError(NumericalError):
    pass


class FormatError(PcnetError, ValueError):
    exit_code = 7
