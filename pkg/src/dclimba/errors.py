"""Exception taxonomy shared across the package.

CLI exit-code mapping: UsageError -> 1, DataError (and subclasses) -> 2,
NumericalError -> 3.
"""


class DataError(Exception):
    """Bad input data: malformed files, invariant violations, grid mismatches."""


class FormatError(DataError):
    """File container is not in the expected format (magic/version)."""


class LengthError(DataError):
    """Declared and actual payload sizes disagree."""


class InvariantError(DataError):
    """A domain invariant is violated (coordinates, signs, shapes)."""


class NumericalError(Exception):
    """Non-finite values where finite ones are required (e.g. NaN loss)."""
