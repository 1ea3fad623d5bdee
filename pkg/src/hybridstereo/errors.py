"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration: bad calibration, unknown variant, bad key."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite numbers are required."""


class DataFormatError(ValueError):
    """A file on disk does not follow the expected format.

    Args:
        message: Human readable description.
        offset: Byte offset in the file where parsing failed, if known.
    """

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset
