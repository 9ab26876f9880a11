"""Exception types shared across the package."""


class SplitFedError(Exception):
    """Base class for every error raised by splitfed."""


class ShapeError(SplitFedError, ValueError):
    """Tensor dimensions do not match what an operation expects."""


class ValidationError(SplitFedError, ValueError):
    """An argument has the right shape but an invalid value."""


class ConfigError(SplitFedError):
    """Inconsistent configuration (resolution, contracts, init mode...)."""


class FormatError(SplitFedError, ValueError):
    """A serialized container (SFPS/SFDS/PGM) is malformed.

    ``offset`` is the byte offset where decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class TrainingDiverged(SplitFedError):
    pass
