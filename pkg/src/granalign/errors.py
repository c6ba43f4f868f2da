"""Exception hierarchy shared by every module.

Exit-code mapping used by the CLI: usage -> 1, data -> 2, numeric -> 3.
"""


class GranalignError(Exception):
    """Base class for all package errors."""


class UsageError(GranalignError):
    """Bad command-line invocation or argument combination."""

    exit_code = 1


class DataError(GranalignError):
    """Malformed files, shape mismatches, unresolved ids."""

    exit_code = 2


class NumericError(GranalignError):
    """Numeric failure: zero norms, fully masked softmax, overflow, non-finite."""

    exit_code = 3
