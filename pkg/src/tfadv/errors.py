"""Exception types shared across the package."""


class TfadvError(Exception):
    """Base class for all package errors."""


class ConfigError(TfadvError, ValueError):
    """Invalid configuration (window, waveform, attack parameters)."""


class DegenerateInputError(TfadvError, ValueError):
    """Input for which the requested quantity is undefined (e.g. max == min)."""


class FormatError(TfadvError, ValueError):
    """Malformed binary or text file."""


class ShapeError(TfadvError, ValueError):
    pass
