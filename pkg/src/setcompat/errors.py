"""Shared exception types so the CLI can map failures to exit codes."""


class EngineError(Exception):
    """Base class for all errors raised by this package on bad input or state."""


class InputError(EngineError, ValueError):
    """Caller supplied data that violates an operation's preconditions."""


class ConfigError(EngineError, ValueError):
    """Configuration is internally inconsistent or incompatible with the data."""
