"""Exception types shared across the toolkit."""


class RGBDEError(Exception):
    """Base class for every error raised by rgbde."""


# geometry / camera
class NonPositiveDepth(RGBDEError, ValueError):
    pass


class NoConvergence(RGBDEError, RuntimeError):
    pass


class InsufficientPulses(RGBDEError, ValueError):
    pass


# calibration
class DegenerateConfiguration(RGBDEError, ValueError):
    pass


class IllConditioned(RGBDEError, ValueError):
    pass


class RankDeficient(RGBDEError, ValueError):
    pass


# simulation / tensors
class ObjectOutOfFrustum(RGBDEError, ValueError):
    pass


class ZeroNormalizer(RGBDEError, ValueError):
    pass


class EmptyDataset(RGBDEError, ValueError):
    pass


# networks
class ShapeMismatch(RGBDEError, ValueError):
    pass


class OddSpatialDims(ShapeMismatch):
    pass


class NonFiniteLoss(RGBDEError, FloatingPointError):
    pass


class ZeroStd(RGBDEError, ValueError):
    pass


# tracking / evaluation
class LengthMismatch(RGBDEError, ValueError):
    pass


class UnsupportedRate(RGBDEError, ValueError):
    pass


class EmptyCrop(RGBDEError, ValueError):
    pass


class Degenerate(RGBDEError, ValueError):
    pass


class FormatError(RGBDEError, ValueError):
    """A file did not match its expected on-disk layout."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = str(path)
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line
