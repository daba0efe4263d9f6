"""Rigid transforms, rotation parameterizations, and the pinhole camera model.

Conventions used throughout the package:

* A ``RigidTransform`` maps child-frame coordinates into parent-frame
  coordinates: ``x_parent = R @ x_child + t``.
* Translations are millimetres. Angles are degrees at public boundaries
  and radians internally.
* Pixel coordinates put the centre of the top-left pixel at ``(0, 0)``,
  x to the right, y down; a ``w x h`` image spans ``[-0.5, w - 0.5]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyInput,
    InvariantViolation,
    NoConvergence,
    NotARotation,
    PointBehindCamera,
)

# Orthonormality drift below SNAP is accepted as-is, drift up to ACCEPT is
# silently re-projected onto SO(3), anything worse is rejected.
_ORTHO_SNAP = 1e-12
_ORTHO_ACCEPT = 1e-6


def orthonormality_error(r: np.ndarray) -> float:
    """Frobenius distance of ``r^T r`` from the identity."""
    r = np.asarray(r, dtype=float)
    return float(np.linalg.norm(r.T @ r - np.eye(3)))


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (polar projection)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def _check_rotation(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise NotARotation(f"expected 3x3 matrix, got shape {r.shape}")
    err = orthonormality_error(r)
    if err > _ORTHO_ACCEPT or np.linalg.det(r) <= 0:
        raise NotARotation(f"orthonormality error {err:.2e} or negative determinant")
    if err > _ORTHO_SNAP:
        r = project_to_so3(r)
    return r


@dataclass(frozen=True)
class RigidTransform:
    """6-DoF pose: orthonormal rotation (det +1) plus translation in mm."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point ``(3,)`` or a batch ``(N, 3)``."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def almost_equal(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return (
            float(np.max(np.abs(self.rotation - other.rotation))) < tol
            and float(np.max(np.abs(self.translation - other.translation))) < tol
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


@dataclass(frozen=True)
class AxisAngle:
    """Rotation as a unit axis and an angle in degrees within [0, 180]."""

    axis: np.ndarray
    angle_deg: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        if not 0.0 <= self.angle_deg <= 180.0:
            raise NotARotation(f"angle {self.angle_deg} outside [0, 180] degrees")
        n = np.linalg.norm(axis)
        if self.angle_deg > 0:
            if n == 0:
                raise NotARotation("zero axis with non-zero angle")
            axis = axis / n
        object.__setattr__(self, "axis", axis)


def rotation_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a rotation vector in radians."""
    v = np.asarray(v, dtype=float).reshape(3)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        # second-order series keeps the result orthonormal to machine precision
        k = _skew(v)
        return np.eye(3) + k + 0.5 * (k @ k)
    axis = v / theta
    k = _skew(axis)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def rotvec_from_rotation(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotation_from_rotvec`; magnitude in [0, pi] radians."""
    r = _check_rotation(r)
    trace = float(np.trace(r))
    cos_theta = max(-1.0, min(1.0, (trace - 1.0) / 2.0))
    v = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_theta = float(np.linalg.norm(v))
    theta = math.atan2(sin_theta, cos_theta)
    if theta < 1e-12:
        return np.zeros(3)
    if sin_theta > 1e-6:
        return v / sin_theta * theta
    # near pi the off-diagonal vector vanishes; recover the axis from R + I
    m = (r + np.eye(3)) / 2.0
    axis = np.sqrt(np.maximum(np.diag(m), 0.0))
    k = int(np.argmax(axis))
    if axis[k] == 0:
        raise NotARotation("cannot extract axis near 180 degrees")
    # fix relative signs from the symmetric products
    axis = m[:, k] / axis[k]
    axis = axis / np.linalg.norm(axis)
    # keep continuity with the small-sin off-diagonal vector when usable
    if sin_theta > 0 and float(np.dot(axis, v)) < 0:
        axis = -axis
    return axis * theta


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def axis_angle_from_rotation(r: np.ndarray) -> AxisAngle:
    """Axis-angle form of a rotation matrix, angle in [0, 180] degrees."""
    v = rotvec_from_rotation(r)
    theta = float(np.linalg.norm(v))
    if theta == 0.0:
        return AxisAngle(np.array([0.0, 0.0, 1.0]), 0.0)
    return AxisAngle(v / theta, math.degrees(theta))


def rotation_from_axis_angle(a: AxisAngle) -> np.ndarray:
    return rotation_from_rotvec(a.axis * math.radians(a.angle_deg))


def rotation_angle_deg(r: np.ndarray) -> float:
    """Magnitude of the axis-angle representation, in degrees."""
    return axis_angle_from_rotation(r).angle_deg


def quaternion_from_rotation(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    r = np.asarray(r, dtype=float)
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([
            0.25 * s,
            (r[2, 1] - r[1, 2]) / s,
            (r[0, 2] - r[2, 0]) / s,
            (r[1, 0] - r[0, 1]) / s,
        ])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(1.0 + r[i, i] - r[j, j] - r[k, k], 0.0)) * 2.0
        q = np.zeros(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def average_rotations(rotations: list[np.ndarray]) -> np.ndarray:
    """Hemisphere-aligned unit-quaternion arithmetic mean.

    Intended for a handful of nearby rotations (stereo / multiview
    initialization), not general rotation averaging.
    """
    if len(rotations) == 0:
        raise EmptyInput("average_rotations requires at least one rotation")
    quats = [quaternion_from_rotation(_check_rotation(r)) for r in rotations]
    acc = quats[0].copy()
    for q in quats[1:]:
        if float(np.dot(q, quats[0])) < 0:
            q = -q
        acc += q
    acc /= len(quats)
    n = np.linalg.norm(acc)
    if n < 1e-9:
        raise EmptyInput("rotations cancel; mean quaternion is degenerate")
    return rotation_from_quaternion(acc / n)


# -- camera model -------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvariantViolation(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise InvariantViolation(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])


@dataclass(frozen=True)
class DistortionModel:
    """Radial (k1, k2, k3) + tangential (p1, p2) lens distortion."""

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    @property
    def is_zero(self) -> bool:
        return self.k1 == self.k2 == self.k3 == self.p1 == self.p2 == 0.0

    def coefficients(self) -> list[float]:
        return [self.k1, self.k2, self.k3, self.p1, self.p2]


@dataclass(frozen=True)
class CameraView:
    """Intrinsics, distortion, and mounting transform of one rig camera.

    ``camera_from_reference`` maps reference-camera coordinates into this
    camera's frame; the reference camera carries the identity.
    """

    intrinsics: CameraIntrinsics
    distortion: DistortionModel = field(default_factory=DistortionModel)
    camera_from_reference: RigidTransform = field(default_factory=RigidTransform)


def _distort_normalized(dist: DistortionModel, x: np.ndarray, y: np.ndarray):
    r2 = x * x + y * y
    radial = 1.0 + r2 * (dist.k1 + r2 * (dist.k2 + r2 * dist.k3))
    x_d = x * radial + 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x)
    y_d = y * radial + dist.p1 * (r2 + 2.0 * y * y) + 2.0 * dist.p2 * x * y
    return x_d, y_d


def project(view: CameraView, points_camera: np.ndarray) -> np.ndarray:
    """Project camera-frame points (mm) to distorted pixel coordinates.

    Accepts a single ``(3,)`` point or an ``(N, 3)`` batch; raises
    :class:`PointBehindCamera` if any depth is non-positive.
    """
    pts = np.asarray(points_camera, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    z = pts[:, 2]
    if np.any(z <= 0):
        raise PointBehindCamera(f"{int(np.sum(z <= 0))} point(s) at non-positive depth")
    x = pts[:, 0] / z
    y = pts[:, 1] / z
    x_d, y_d = _distort_normalized(view.distortion, x, y)
    k = view.intrinsics
    pix = np.stack([k.fx * x_d + k.cx, k.fy * y_d + k.cy], axis=1)
    return pix[0] if single else pix


def distort_pixel(view: CameraView, pixels: np.ndarray) -> np.ndarray:
    """Map ideal (undistorted) pixel coordinates to observed ones."""
    pix = np.asarray(pixels, dtype=float)
    single = pix.ndim == 1
    pix = np.atleast_2d(pix)
    k = view.intrinsics
    x = (pix[:, 0] - k.cx) / k.fx
    y = (pix[:, 1] - k.cy) / k.fy
    x_d, y_d = _distort_normalized(view.distortion, x, y)
    out = np.stack([k.fx * x_d + k.cx, k.fy * y_d + k.cy], axis=1)
    return out[0] if single else out


_UNDISTORT_ITERS = 20
_UNDISTORT_TOL = 1e-9       # in normalized coordinates
_UNDISTORT_RESIDUAL = 1e-6  # in pixels, verified after iteration


def undistort_pixel(view: CameraView, pixels: np.ndarray) -> np.ndarray:
    """Invert the distortion map by fixed-point iteration.

    Raises :class:`NoConvergence` when the re-distorted result misses the
    input by more than 1e-6 px after the iteration cap.
    """
    pix = np.asarray(pixels, dtype=float)
    if not np.all(np.isfinite(pix)):
        raise NoConvergence("non-finite pixel coordinates")
    single = pix.ndim == 1
    pix = np.atleast_2d(pix)
    if view.distortion.is_zero:
        out = pix.copy()
        return out[0] if single else out
    k = view.intrinsics
    x_obs = (pix[:, 0] - k.cx) / k.fx
    y_obs = (pix[:, 1] - k.cy) / k.fy
    x, y = x_obs.copy(), y_obs.copy()
    d = view.distortion
    for _ in range(_UNDISTORT_ITERS):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (d.k1 + r2 * (d.k2 + r2 * d.k3))
        dx = 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x)
        dy = d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y
        x_new = (x_obs - dx) / radial
        y_new = (y_obs - dy) / radial
        step = np.max(np.hypot(x_new - x, y_new - y))
        x, y = x_new, y_new
        if step < _UNDISTORT_TOL:
            break
    x_d, y_d = _distort_normalized(d, x, y)
    residual = np.hypot(k.fx * (x_d - x_obs), k.fy * (y_d - y_obs))
    if np.max(residual) > _UNDISTORT_RESIDUAL:
        raise NoConvergence(
            f"undistortion residual {float(np.max(residual)):.2e} px after "
            f"{_UNDISTORT_ITERS} iterations"
        )
    out = np.stack([k.fx * x + k.cx, k.fy * y + k.cy], axis=1)
    return out[0] if single else out


# Spec-facing aliases matching the operation names.
undistort_point = undistort_pixel
