"""
Exception hierarchy for the scan engine.

ValueError subclasses are input problems (the CLI exits with 1), everything
else is a runtime failure (exit 2).
"""


class ScanLabError(Exception):
    """Base class for all engine errors"""


class ValidationError(ScanLabError, ValueError):
    """Invalid input or violated precondition"""


class PatternError(ValidationError):
    pass


class GeometryError(ValidationError):
    pass


class NetSizeError(ValidationError):
    pass


class TensorFormatError(ValidationError):
    pass


class InsufficientReplicatesError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class PlacementError(ScanLabError, RuntimeError):
    """No feasible signal placement was found"""
