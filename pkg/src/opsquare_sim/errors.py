"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid topology or scenario configuration."""


class ProtocolViolation(RuntimeError):
    """A data-plane invariant was broken (simulator bug, not traffic loss)."""
