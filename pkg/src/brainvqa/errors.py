"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration problems exit 2, data and
format problems exit 3, numerical failures exit 4.
"""


class BrainVQAError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(BrainVQAError):
    """Invalid configuration: bad paths, malformed config files, bad flags."""


class FormatError(BrainVQAError):
    """Malformed or unsupported input file content."""


class UnsupportedDatatypeError(FormatError):
    """NIfTI datatype code we do not decode."""


class TruncatedFileError(FormatError):
    """Payload shorter than the header-declared data size."""


class CapacityError(BrainVQAError):
    """Value does not fit the on-disk field (e.g. dim > 32767)."""


class GeometryError(BrainVQAError):
    """Inconsistent grids, non-invertible affines, undefined ratios."""


class DegenerateHullError(GeometryError):
    """Convex hull input is coplanar or collinear; no 3D volume exists."""


class TemplateError(BrainVQAError):
    """Template text violates the placeholder contract."""


class BankError(TemplateError):
    """Template bank fails validation (coverage, capacity, format)."""


class TrainingError(BrainVQAError):
    """Optimization diverged (non-finite loss)."""
