"""Exceptions shared across modules; the CLI maps them to exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent study configuration."""


class InvariantViolation(ArithmeticError):
    """A numerical invariant failed at run time."""
