"""Exception types shared across the labeling pipeline."""


class MoslabelError(ValueError):
    """Base class for all pipeline errors."""


class FormatError(MoslabelError):
    """A file on disk does not match the expected binary/text layout."""


class ConfigError(MoslabelError):
    """Invalid configuration value, unknown key, or missing calibration."""


class SyncGapError(MoslabelError):
    """No frame of a sensor lies close enough in time to the reference frame."""


class EmptyInputError(MoslabelError):
    """An operation that needs data received an empty collection."""


class DegenerateInputError(MoslabelError):
    """Input is too small or ill-conditioned for the requested operation."""


class DegenerateOrientationError(MoslabelError):
    """Heading extraction failed because the forward axis points near vertical."""


class UndefinedMetricError(MoslabelError):
    """A metric has no defined value for the given inputs (empty denominator)."""


class InvalidAnchorError(MoslabelError):
    """Split anchor blocks overlap or fall outside the frame range."""
