"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the domain an operation is defined on."""


class DatasetError(ValueError):
    """A dataset on disk does not match the documented layout."""


class CheckpointError(ValueError):
    """A checkpoint blob is malformed or truncated."""
