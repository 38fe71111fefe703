"""Exception types raised across the package."""


class TabprefError(Exception):
    """Base class for errors raised by this package."""


class SchemaError(TabprefError, ValueError):
    """A schema is malformed or does not match the data."""


class DataError(TabprefError, ValueError):
    """Data violates a precondition of the requested operation."""


class ConstraintError(TabprefError, ValueError):
    """A rule is invalid or cannot be applied to a row."""
