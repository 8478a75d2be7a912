"""Exception hierarchy shared by the library and the command-line harness."""


class SpectralCTError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ConfigError(SpectralCTError, ValueError):
    """An experiment configuration is invalid, incomplete or references missing files."""


class DatasetError(SpectralCTError, OSError):
    """A dataset directory cannot be written or read back consistently."""


class NumericalError(SpectralCTError, ArithmeticError):
    """A computation produced non-finite values (e.g. a diverging training loss)."""
