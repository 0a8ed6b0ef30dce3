"""Exception types shared across the package."""


class RplkgError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(RplkgError):
    """Input violates a documented invariant (bad shapes, norms, labels...)."""


class FormatError(RplkgError):
    """A file or stream does not conform to an on-disk format."""


class EmptyGraphError(ValidationError):
    """A graph dump contained zero well-formed triplet lines."""
