"""Exception types shared across the package."""


class CvmixError(Exception):
    """Base class for all package-specific failures."""


class DataError(CvmixError):
    """Malformed or inconsistent input data: manifests, feature files,
    descriptor files, checkpoints."""


class NumericError(CvmixError):
    """Numeric breakdown: non-finite values, degenerate vectors,
    failed gradient validation."""
