"""Exception hierarchy shared by every stage of the engine."""


class TrajConsensusError(Exception):
    """Base class for all engine errors."""


class SchemaError(TrajConsensusError):
    """A trajectory file or schema mapping is missing required columns."""


class EmptyDatasetError(TrajConsensusError):
    """An input file contains no usable rows."""


class ConfigurationError(TrajConsensusError):
    """A geometry, zone layout, scenario or run configuration is invalid."""


class ResampleError(TrajConsensusError):
    """Resampling would collapse a track to a single sample."""


class WindowCoverageError(TrajConsensusError):
    """A track does not cover the time window an operation needs."""


class EmptySummaryError(TrajConsensusError):
    """A summary was requested over an empty collection."""


class MissingDependencyError(TrajConsensusError):
    """A pipeline stage could not find an upstream artifact."""


class StaleArtifactError(TrajConsensusError):
    """An upstream artifact no longer matches the hash in its manifest."""


class ScenarioError(ConfigurationError):
    """A synthetic scenario specification is invalid."""
