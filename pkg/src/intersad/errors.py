"""Shared exception types.

Two failure families are kept apart on purpose: violations of a caller-facing
contract (bad shapes, empty inputs, out-of-range options) and numeric
breakdowns discovered at runtime (non-finite values). The CLI maps the former
to usage errors and the latter to hard failures.
"""


class ContractViolation(ValueError):
    """An argument or call sequence broke a documented precondition."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or has an unsupported format version."""


class ConfigError(ValueError):
    """A run configuration file or override is invalid."""
