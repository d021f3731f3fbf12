"""Exception hierarchy shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition (width, shape, range)."""


class MetricUndefinedError(ValueError):
    """A metric has no defined value for the given samples."""


class UnsupportedPolicyError(ValueError):
    """The requested operation is not defined for the model's precision policy."""


class IdxFormatError(ValueError):
    """Base class for malformed IDX files."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class BundleError(ValueError):
    """A weight bundle manifest or blob is inconsistent."""
