"""Exception and warning types raised across the package."""


class DeformtrackError(Exception):
    """Base class for all library errors."""


class NotPositiveDefinite(DeformtrackError):
    """A matrix handed to a Cholesky solve has a non-positive pivot."""


class BehindCamera(DeformtrackError):
    """A point with z <= 0 was passed to the pinhole projection."""


class AllZeroWeights(DeformtrackError):
    """Every blend weight is zero; the blended warp is undefined."""


class EmptyTemplate(DeformtrackError):
    """A template with no points cannot seed a control graph."""


class TooFewMatches(DeformtrackError):
    """Fewer than two matches; rectification is undefined."""


class DegenerateConfiguration(DeformtrackError):
    """Weighted match vectors span less than two dimensions."""


class NoValidHypothesis(DeformtrackError):
    """Every consensus hypothesis was discarded during preselection."""


class SizeMismatch(DeformtrackError):
    """Recovered and ground-truth surfaces have different point counts."""


class ConfigError(DeformtrackError):
    """A run configuration is malformed (unknown key, bad value)."""


class FileFormatError(DeformtrackError):
    """An input file does not parse as its declared format."""


class SingleControlPointWarning(UserWarning):
    """A control graph has fewer than two nodes and therefore no edges."""
