"""Exception types shared across the package."""


class UmriError(Exception):
    """Base class for all package errors."""


class InvalidDataError(UmriError, ValueError):
    """Input samples are non-finite or otherwise unusable."""


class ShapeError(UmriError, ValueError):
    """Array shapes do not agree."""


class ConfigError(UmriError, ValueError):
    """A configuration value violates its documented invariants."""


class FormatError(UmriError, ValueError):
    """A weight or volume file is malformed."""


class ContractError(UmriError, RuntimeError):
    """An API was called outside of its contract."""


class DivergenceError(UmriError, RuntimeError):
    """Training produced a non-finite loss."""
