# src/ppslab/errors.py - Exception hierarchy for the simulator and learning stages

from typing import Any, Optional


class PpsLabError(Exception):
    """Base exception for every failure raised by ppslab."""

    def __init__(
        self,
        message: str,
        error_code: Optional[str] = None,
        details: Optional[dict[str, Any]] = None,
    ):
        self.message = message
        self.error_code = error_code or type(self).__name__
        self.details = details or {}
        super().__init__(self.message)


class ConfigError(PpsLabError):
    """Configuration file or value rejected."""


# World
class WorldError(PpsLabError):
    """Simulator refused a request."""


class InvalidTarget(WorldError):
    """Commanded joint configuration outside the declared joint ranges."""


class OverlapError(WorldError):
    """A placed block would intersect an existing block."""


class WorldNotEmpty(WorldError):
    """Graph construction requested in a world that still holds blocks."""


class InvalidStart(WorldError):
    """No valid resting configuration could be found for the arm."""


# Percepts
class PerceptError(PpsLabError):
    """Mask or depth geometry could not be derived."""


class HandNotVisible(PerceptError):
    """No hand pixels in the percept."""


class EmptyMask(PerceptError):
    """Operation needs at least one pixel."""


class DegenerateVector(PerceptError):
    """Vector endpoints coincide."""


class BlockNotVisible(PerceptError):
    """Requested block has no pixels in the percept."""


class DegenerateMask(PerceptError):
    """Mask too small for a principal axis."""


class BothEmpty(PerceptError):
    """IOU of two empty masks is undefined."""


# Graph
class GraphError(PpsLabError):
    """PPS graph construction or query failed."""


class RejectionLimit(GraphError):
    """Too many consecutive invalid babbling samples."""


class NoPath(GraphError):
    """Destination unreachable under the requested edge bans."""


class NoNeighbors(GraphError):
    """Node has no neighbors to estimate a local Jacobian from."""


class InvalidGraphSize(GraphError):
    """Graph size must be at least one node."""


class ArchiveError(GraphError):
    """Graph archive unreadable or of an unknown format version."""


# Learning
class LearningError(PpsLabError):
    """Reach or grasp learning could not proceed."""


class InsufficientHistory(LearningError):
    """Clusterer needs at least two historical values."""


class InsufficientData(LearningError):
    """Not enough samples to compute the requested statistic."""


class NoCandidates(LearningError):
    """No candidate final node survives filtering."""


class NoSuccessfulInterval(LearningError):
    """Wrist replay never reproduced the grasp."""


class NoExamples(LearningError):
    """Example grasp database is empty."""


class MissingReturnPercepts(LearningError):
    """Record lacks the return observations needed to classify a grasp."""


class StageFailure(PpsLabError):
    """A pipeline stage failed; wraps the underlying cause."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(
            f"stage '{stage}' failed: {type(cause).__name__}: {cause}",
            error_code="StageFailure",
            details={"stage": stage, "cause": type(cause).__name__},
        )
