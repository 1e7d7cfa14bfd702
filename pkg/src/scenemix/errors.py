"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: format/consistency/validation problems
exit with 2, numeric failures with 3.
"""


class ScenemixError(Exception):
    """Base class for all toolkit errors."""


class UsageError(ScenemixError):
    """The invocation itself is wrong (unknown key, malformed override)."""


class FormatError(ScenemixError):
    """A file does not conform to its on-disk format."""


class ConsistencyError(ScenemixError):
    """Related inputs disagree (lengths, shapes, ids)."""


class ValidationError(ScenemixError):
    """A value violates a documented precondition or invariant."""


class NumericError(ScenemixError):
    """A numeric quantity became non-finite or otherwise unusable."""
