"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes (config -> 2, data -> 3,
numeric -> 4), so raising the right class matters for scripting.
"""


class NbmlssError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(NbmlssError):
    """Invalid configuration, shapes, or option values."""


class DataError(NbmlssError):
    """Malformed or inconsistent input data."""


class NumericError(NbmlssError):
    """Non-finite values or numerically invalid states."""


class StateError(NbmlssError):
    """Operation called in an invalid order (e.g. backward without a recorded forward)."""
