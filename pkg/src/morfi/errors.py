"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: validation problems exit 2, oracle
failures exit 3, broken internal invariants exit 4.
"""


class MorfiError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(MorfiError, ValueError):
    """Input data or configuration is invalid."""


class OracleError(MorfiError, RuntimeError):
    """A model or answer oracle failed to produce a usable response."""


class InvariantViolation(MorfiError, AssertionError):
    """An internal consistency check failed."""
