"""Exception types shared across the pipeline."""


class SpectrumDCError(Exception):
    """Base class for all library errors."""


class FormatError(SpectrumDCError):
    """A binary file has a bad magic, version or is truncated."""


class VersionError(FormatError):
    pass


class DataError(SpectrumDCError):
    """Payload contains non-finite values."""


class ConfigError(SpectrumDCError, ValueError):
    pass


class ShapeError(SpectrumDCError, ValueError):
    pass


class EmptySetError(SpectrumDCError, ValueError):
    pass


class LabelRangeError(SpectrumDCError, ValueError):
    pass


class DegenerateDataError(SpectrumDCError, ValueError):
    """Data has zero total variance."""


class DegenerateFeaturesError(DegenerateDataError):
    """CNN features collapsed to a single point."""


class InsufficientModelError(SpectrumDCError):
    """A PCA model holds too few components to answer the query."""


class SingleClusterError(SpectrumDCError, ValueError):
    pass


class EmptyClusterError(SpectrumDCError, ValueError):
    pass


class MissingArtifactError(SpectrumDCError):
    pass


class InterruptError(SpectrumDCError):
    """Training was interrupted; ``checkpoint`` points at the last completed epoch."""

    def __init__(self, message, checkpoint=None, epochs_completed=0):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epochs_completed = epochs_completed


class RankWarning(UserWarning):
    """Requested more principal components than the numerical rank."""
