"""Exception types shared across the package."""


class DifftrackError(Exception):
    """Base class for every error this package raises deliberately."""


class InvalidParameterError(DifftrackError, ValueError):
    """A numeric parameter is outside its legal range."""


class InvalidDirectionError(DifftrackError, ValueError):
    """A direction vector is zero, non-finite, or not unit length."""


class DimensionMismatchError(DifftrackError, ValueError):
    """Array sizes disagree (coefficient count vs band limit, grids, ...)."""


class DomainError(DifftrackError, ValueError):
    """A position falls outside the valid image domain.

    Carries the offending position in ``position`` when known.
    """

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class FormatError(DifftrackError, IOError):
    """A file does not match the expected on-disk layout.

    ``offset`` is the byte offset of the offending field when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TapePoisonedError(DifftrackError, ArithmeticError):
    """A recorded operation produced a non-finite value.

    ``node`` identifies the offending tape node.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class NoGradientError(DifftrackError, ValueError):
    """backward() was asked to differentiate a constant."""


class InvalidInputError(DifftrackError, ValueError):
    """An operation received empty or otherwise unusable input data."""
