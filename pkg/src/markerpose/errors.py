"""Exception types shared across the toolkit."""

from __future__ import annotations


class MarkerPoseError(Exception):
    """Base class for all toolkit errors."""


# -- geometry ---------------------------------------------------------------

class PointBehindCamera(MarkerPoseError):
    """A 3D point with non-positive depth was passed to the projection."""


class NoConvergence(MarkerPoseError):
    """Iterative inversion of the distortion map failed to converge."""


class NotARotation(MarkerPoseError):
    """A matrix failed the orthonormality / determinant check."""


class EmptyInput(MarkerPoseError):
    """An operation requiring a non-empty input received an empty one."""


# -- detection --------------------------------------------------------------

class DimensionMismatch(MarkerPoseError):
    """Image dimensions do not match the camera description."""


class WrongBlobCount(MarkerPoseError):
    """Detection survivor count differs from the expected marker count.

    Signals the operator-intervention path: thresholding / filtering
    parameters need adjustment.
    """

    def __init__(self, found: int, expected: int):
        super().__init__(f"detected {found} blobs, expected {expected}")
        self.found = found
        self.expected = expected


class AmbiguousAssignment(MarkerPoseError):
    """Two marker orderings score within 1% of each other."""


class CountMismatch(MarkerPoseError):
    """Centroid count differs from the model marker count."""


# -- pose -------------------------------------------------------------------

class DegenerateConfiguration(MarkerPoseError):
    """Point configuration does not determine a homography."""


class BehindCamera(MarkerPoseError):
    """Homography decomposition places the plane behind the camera."""


class DivergedBehindCamera(MarkerPoseError):
    """Pose refinement was handed a state with non-positive depths."""


class SingularNormalEquations(MarkerPoseError):
    """The damped normal equations could not be solved."""


class GateFailed(MarkerPoseError):
    """Reprojection error exceeded the gate threshold.

    Carries the offending estimate so the operator can review it.
    """

    def __init__(self, estimate, threshold: float):
        super().__init__(
            f"mean reprojection error {estimate.mean_reprojection_error:.3f} px "
            f"exceeds gate threshold {threshold:.3f} px"
        )
        self.estimate = estimate
        self.threshold = threshold


class ExtrinsicsMissing(MarkerPoseError):
    """Stereo estimation requires a second camera with extrinsics."""


class InsufficientViews(MarkerPoseError):
    """Too few usable frames for the requested multiview method."""


# -- calibration ------------------------------------------------------------

class DegenerateMotions(MarkerPoseError):
    """Calibration motions leave the hand-eye rotations underdetermined."""


class TooFewPairs(MarkerPoseError):
    """Hand-eye calibration needs at least three pose pairs."""


class SchemaError(MarkerPoseError):
    """A configuration or calibration file violates its schema."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.field_path = path


class InvariantViolation(MarkerPoseError):
    """A loaded value violates a documented invariant."""


# -- simulator --------------------------------------------------------------

class TargetBehindCamera(MarkerPoseError):
    """The camera pose places the target behind the image plane."""


class LimitsInfeasible(MarkerPoseError):
    """Pose sampling rejected (almost) every candidate."""
