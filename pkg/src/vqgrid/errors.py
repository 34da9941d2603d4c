"""Shared exception types."""


class NumericError(RuntimeError):
    """An optimization or evaluation produced non-finite values."""
