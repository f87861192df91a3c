"""Exception types shared across the toolkit."""


class BowlkitError(Exception):
    """Base class for all toolkit errors."""


class FormatError(BowlkitError):
    """A file does not conform to its declared layout."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File declares an unsupported format version."""


class TruncatedFileError(FormatError):
    """File ends before the header-declared payload."""


class ParseError(FormatError):
    """Malformed text record; carries the 1-based line number."""

    def __init__(self, message, line_number):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DimensionError(BowlkitError):
    """Vector dimensionality disagrees between operands."""


class DegenerateInputError(BowlkitError):
    """Input carries no usable signal (zero vector, constant scores, ...)."""


class ConfigError(BowlkitError):
    """Invalid configuration value or missing prerequisite."""


class EmptyDatasetError(BowlkitError):
    """A training or evaluation stage received no records."""


class CoverageError(BowlkitError):
    """Predictions do not cover all supervision targets."""


class RoleError(BowlkitError):
    """A record with the wrong role reached a role-specific computation."""


class ConsistencyError(BowlkitError):
    """Internal invariant violated between paired records."""
