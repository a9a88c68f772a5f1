"""Exception types raised across the package."""


class KillShapeError(Exception):
    """Base class for all package errors."""


class DegenerateGradient(KillShapeError, ValueError):
    """Spatial gradient of the implicit function is (numerically) zero."""


class NoValidSamples(KillShapeError, RuntimeError):
    """Every candidate sample was rejected."""


class ZeroLatent(KillShapeError, ValueError):
    pass


class AntipodalLatent(KillShapeError, ValueError):
    pass


class ZeroSpeed(KillShapeError, ValueError):
    pass


class SizeMismatch(KillShapeError, ValueError):
    pass


class EmptySurface(KillShapeError, RuntimeError):
    pass


class NonFiniteError(KillShapeError, FloatingPointError):
    """A NaN or infinity appeared where a finite value is required."""


class DivergenceError(KillShapeError, RuntimeError):
    pass


class VersionError(KillShapeError, ValueError):
    """Checkpoint magic or version is not recognised."""


class FormatError(KillShapeError, ValueError):
    """Checkpoint payload is truncated or malformed."""


class ConfigError(KillShapeError, ValueError):
    pass
