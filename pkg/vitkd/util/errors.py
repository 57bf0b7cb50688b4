class VitkdError(Exception):
    """
    Base class of every error raised by the package.
    `exit_code` is what the CLI exits with when the error reaches it
    """

    exit_code = 1


class ConfigError(VitkdError, ValueError):
    """
    Invalid, missing or inconsistent configuration
    """

    exit_code = 2


class ShapeError(ConfigError):
    """
    Operand shapes do not fit the operation
    """


class TokenGridError(ShapeError):
    """
    Student and teacher patch grids (token counts) differ
    """


class ContractError(VitkdError):
    """
    API used outside of its contract (non-scalar backward, empty batch etc.)
    """

    exit_code = 2


class DataIOError(VitkdError, OSError):
    """
    Base class for persistence failures: loaders and savers
    """

    exit_code = 3


class FormatError(DataIOError):
    """
    Wrong magic or malformed header
    """


class UnsupportedVersionError(FormatError):
    """
    Known format family, unknown version
    """


class CountError(DataIOError):
    """
    Number of images and labels differ
    """


class TruncatedError(DataIOError):
    """
    File ends before its header says it should
    """


class ChecksumError(DataIOError):
    """
    Stored CRC32 does not match the content
    """


class NumericError(VitkdError, ArithmeticError):
    """
    NaN/Inf values, diverged losses or failed gradient audits
    """

    exit_code = 4


class DegenerateAttentionError(NumericError):
    """
    Attention with at least one query but no key to attend to
    """
