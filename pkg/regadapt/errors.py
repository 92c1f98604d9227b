"""Exception hierarchy shared by every regadapt module."""


class RegAdaptError(Exception):
    """Base class for all regadapt failures."""


class VolumeFormatError(RegAdaptError):
    """Malformed, missing or unreadable volume/field/label/landmark file."""


class ShapeError(RegAdaptError, ValueError):
    """Dims or tensor shapes that do not line up."""


class NumericalError(RegAdaptError, ArithmeticError):
    """Non-finite loss, gradient or field encountered during optimization."""


class StyleTransferError(RegAdaptError):
    """External style-transfer command failed or returned a bad volume."""


class ConfigError(RegAdaptError, ValueError):
    """Parameter outside its documented range."""
