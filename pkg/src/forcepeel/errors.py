"""Error taxonomy shared across the package.

Three families matter at the process boundary, and the command-line layer
maps them to exit codes: parse or I/O problems (exit 1), validation of
inputs or state (exit 2), numeric failures such as divergence (exit 3).
"""


class ForcepeelError(Exception):
    """Base class for all package errors."""


class ParseError(ForcepeelError):
    """Malformed file, record, or serialized blob."""


class ValidationError(ForcepeelError):
    """Input violates a documented precondition or invariant."""


class NumericError(ForcepeelError):
    """Computation produced NaN, diverged, or lost rank unexpectedly."""


class FrameError(ValidationError):
    """Wrench or pose used in a frame it is not expressed in."""


class NormalizationError(ValidationError):
    """Quaternion norm too far from one to be safely renormalized."""


class StreamError(ValidationError):
    """Timed stream is empty, unordered, or queried out of range."""


class DegeneratePosesError(ValidationError):
    """Calibration orientation set does not span enough of SO(3)."""


class InconsistentDataError(ValidationError):
    """Measurements contradict the physical model being fitted."""


class EmptyCloudError(ValidationError):
    """Point cloud operation produced or received zero points."""


class DegenerateDirectionError(ValidationError):
    """Pose window too short or stationary to define a motion direction."""


class NoContactError(ValidationError):
    """Guarded press ran out of time or travel before touching anything."""


class SafetyStopError(ForcepeelError):
    """Measured force exceeded the hard safety ceiling; motion halted."""


class TrainingDivergedError(NumericError):
    """Loss became NaN or exploded during optimization."""
