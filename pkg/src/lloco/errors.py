class LlocoError(Exception):
    """Base class for all errors raised by this package."""


class LengthOverflowError(LlocoError):
    """Combined input length exceeds the model window."""


class CorruptFileError(LlocoError):
    pass


class VersionMismatchError(LlocoError):
    pass


class NotFoundError(LlocoError, KeyError):
    pass


class MixedGroupError(LlocoError):
    pass


class EmptyStoreError(LlocoError):
    pass


class MissingArchiveError(LlocoError):
    pass


class DivergenceError(LlocoError):
    """Training loss became non-finite."""
