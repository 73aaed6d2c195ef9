"""Exception hierarchy shared by every stage of the pipeline."""


class ImportantAugError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(ImportantAugError, ValueError):
    """An argument has the wrong shape, length, range or format."""


class InvalidConfigError(ImportantAugError, ValueError):
    """A configuration value is outside its documented domain."""


class InvalidStateError(ImportantAugError, RuntimeError):
    """An operation cannot proceed, e.g. an empty pool after filtering."""


class DataError(InvalidInputError):
    """A corpus file or split list is missing, corrupt or unsupported."""


class NumericError(ImportantAugError, FloatingPointError):
    """A computation produced or would produce a non-finite value."""


class CheckpointError(ImportantAugError, RuntimeError):
    """A checkpoint file is unreadable, from another version, or mismatched."""
