"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A numeric invariant was violated (non-finite or out-of-domain values)."""


class UsageError(ValueError):
    """An API was called in an unsupported way."""


class ConfigurationError(ValueError):
    """A configuration value is inconsistent or missing."""


class GeometryError(ValueError):
    """A geometric fit is degenerate."""


class StateError(RuntimeError):
    """An object was used before its required state was populated."""


class DataError(ValueError):
    """A dataset or input file is malformed."""


class VersionError(RuntimeError):
    """A file's version or layout does not match this code."""


class SpecificationError(ValueError):
    """A generator specification is self-contradictory."""
