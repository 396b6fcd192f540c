"""Exception hierarchy.  ``category`` is the machine-readable tag the CLI prints."""


class DictDisError(Exception):
    category = "error"


class InputError(DictDisError, ValueError):
    """Malformed or inconsistent input files/data."""

    category = "input"


class ConfigError(DictDisError, ValueError):
    category = "config"


class NonFiniteError(DictDisError, FloatingPointError):
    """A NaN/inf appeared in a forward pass or the loss."""

    category = "numeric"
