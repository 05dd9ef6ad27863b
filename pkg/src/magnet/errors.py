"""Exception hierarchy shared by every layer of the package."""


class MagNetError(Exception):
    """Base class for all package errors."""


class ShapeError(MagNetError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ConfigError(MagNetError, ValueError):
    """A hyperparameter or configuration value is invalid."""


class ContractError(MagNetError, ValueError):
    """A caller violated an operation's precondition."""


class DataError(MagNetError):
    """A dataset directory or image file could not be loaded."""


class CheckpointError(MagNetError):
    """A checkpoint is corrupt or does not match the model configuration."""


class DivergenceError(MagNetError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class FormatError(DataError):
    """An image file is not 8-bit grayscale PNG."""
