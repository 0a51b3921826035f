"""Exception types shared across the package."""


class MarkerMapError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MarkerMapError):
    """Operand dimensions do not line up."""


class DataFormatError(MarkerMapError):
    """Malformed input file; message carries the offending line number."""


class TrainingDiverged(MarkerMapError):
    """A non-finite loss was encountered; message carries run diagnostics."""
