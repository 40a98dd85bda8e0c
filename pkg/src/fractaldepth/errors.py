"""Exception hierarchy shared by all modules."""


class FractalDepthError(Exception):
    """Base class for all library errors."""


class ConfigError(FractalDepthError):
    """Invalid configuration value or combination."""


class ResampleError(FractalDepthError):
    """Resolution constraint violated for a resampling operation."""


class ShapeError(FractalDepthError):
    """Array shapes do not agree with the operation's contract."""


class TimestepError(FractalDepthError):
    """Diffusion timestep outside [1, T]."""


class NumericsError(FractalDepthError):
    """Non-finite values encountered; the triggering update is rejected."""


class InputError(FractalDepthError):
    """Semantically invalid input (e.g. too few samples, empty mask)."""
