"""Exception types shared across the package."""


class BdpurifyError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BdpurifyError):
    """Invalid configuration value, schema violation, or unknown key."""


class DataFormatError(BdpurifyError):
    """Malformed dataset file (bad header, bad magic, ragged rows, ...)."""


class InfeasibleError(BdpurifyError):
    """A sampling or poisoning request cannot be satisfied from the data."""


class UsageError(BdpurifyError):
    """API misuse: stale cache, shape mismatch, index out of range."""
