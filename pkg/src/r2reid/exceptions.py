"""Exception hierarchy shared across the package."""


class R2ReidError(Exception):
    """Base class for all errors raised by r2reid."""


class ShapeError(R2ReidError, ValueError):
    pass


class DivisibilityError(ShapeError):
    pass


class ConfigError(R2ReidError, ValueError):
    pass


class DatasetError(R2ReidError, ValueError):
    pass


class FormatError(R2ReidError, ValueError):
    """A binary file could not be decoded."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class RetrievalError(R2ReidError, ValueError):
    pass


class BatchError(R2ReidError, ValueError):
    """A pair batch violates the same/different labelling invariant."""
