"""Exception types raised across the package."""


class RoIStereoError(Exception):
    """Base class for all package errors."""


class DegenerateBox(RoIStereoError, ValueError):
    pass


class BehindCamera(RoIStereoError, ValueError):
    pass


class SingularIntrinsics(RoIStereoError, ValueError):
    pass


class ShapeMismatch(RoIStereoError, ValueError):
    pass


class NumericalOverflow(RoIStereoError, FloatingPointError):
    pass


class NoRealMass(RoIStereoError):
    """An assignment row carries no mass on real (non-dummy) columns."""


class InvalidRange(RoIStereoError, ValueError):
    pass


class EmptyVolume(RoIStereoError):
    pass


class ZeroVector(RoIStereoError, ValueError):
    pass


class DegenerateLabels(RoIStereoError, ValueError):
    pass


class ConfigError(RoIStereoError, ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
