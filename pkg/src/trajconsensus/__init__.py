"""Trajectory analytics for AV and vulnerable-road-user interactions.

Stages: ingestion and resampling (:mod:`core`), pairwise encounter detection
(:mod:`interactions`), surrogate safety measures (:mod:`safety`), headways,
platoons and string stability (:mod:`flow`), pedestrian hesitation and
deceleration maps (:mod:`vru`), per-frame consensus classification
(:mod:`consensus`) and closed-form synthetic scenarios (:mod:`synth`).
"""

__version__ = "0.1.0"

from .core import AgentClass, AgentTrack, Dataset, IntersectionGeometry, ingest_dataset, resample_track
from .errors import TrajConsensusError

__all__ = [
    "AgentClass",
    "AgentTrack",
    "Dataset",
    "IntersectionGeometry",
    "TrajConsensusError",
    "ingest_dataset",
    "resample_track",
]
