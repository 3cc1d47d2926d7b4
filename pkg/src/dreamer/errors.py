"""Shared exception types.

Everything user-facing funnels into one of these so the CLI can map
failures onto stable exit codes (config/input problems vs numeric blowups).
"""


class DreamerError(Exception):
    """Base class for all package errors."""


class ShapeError(DreamerError):
    """Operands have incompatible shapes or dtypes for an engine op."""


class NumericError(DreamerError):
    """Non-finite values or a numerically failed step."""


class ConfigError(DreamerError):
    """Invalid or inconsistent configuration."""


class InputError(DreamerError):
    """Invalid runtime input (token ids, prompt length, file contents)."""


class ContractError(DreamerError):
    """An API precondition was violated by the caller."""


class EmptyDataError(DreamerError):
    """A statistic was requested over an empty distribution."""
