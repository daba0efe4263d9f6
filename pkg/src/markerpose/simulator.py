"""Synthetic rig: renders marker-target frames and simulates the robot.

Rendering ray-casts each pixel onto the target plane, so lens distortion,
perspective, and sub-pixel coverage are all geometrically exact up to the
supersampling grid. The robot model is ideal in actuation and configurable
in what it *reports* (bias and noise live between actual and reported TCP
poses), which is what the accuracy protocol needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import Rig
from .errors import LimitsInfeasible, SchemaError, TargetBehindCamera
from .geometry import (
    CameraIntrinsics,
    CameraView,
    DistortionModel,
    RigidTransform,
    compose,
    invert,
    project,
    rotation_from_rotvec,
)
from .images import GrayImage
from .target import TargetModel, default_target_model

BASE_WIDTH, BASE_HEIGHT = 640, 400
BASE_FOCAL = 368.1   # px at 640x400 for the 82-degree horizontal field of view


# -- scene ---------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    """Appearance of the rendered scene; intensities are 8-bit gray levels."""

    target: TargetModel = field(default_factory=default_target_model)
    bead_intensity: int = 230
    surface_intensity: int = 60
    background_intensity: int = 20
    specular_count: int = 0
    specular_size_range: tuple[float, float] = (8.0, 14.0)       # major semi-axis, mm
    specular_eccentricity_range: tuple[float, float] = (0.955, 0.985)
    specular_intensity: int = 240
    noise_sigma: float = 0.0          # gray levels
    # 8 samples per axis: at 4 the coverage quantization couples with the
    # adaptive threshold and pushes worst-case centroids past 0.3 px
    supersampling: int = 8
    plate_margin: float = 20.0        # plate extends this far beyond the markers, mm
    occluded_markers: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("bead_intensity", "surface_intensity", "background_intensity",
                     "specular_intensity"):
            v = getattr(self, name)
            if not 0 <= v <= 255:
                raise SchemaError(name, f"intensity {v} outside [0, 255]")
        if self.bead_intensity <= self.surface_intensity:
            raise SchemaError("bead_intensity", "beads must be brighter than the surface")
        if self.supersampling < 1:
            raise SchemaError("supersampling", "supersampling must be >= 1")
        if self.noise_sigma < 0:
            raise SchemaError("noise_sigma", "noise sigma must be >= 0")

    def plate_rect(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) of the plate in target-plane mm."""
        pts = self.target.plane_points()
        m = self.plate_margin
        return (
            float(pts[:, 0].min() - m), float(pts[:, 1].min() - m),
            float(pts[:, 0].max() + m), float(pts[:, 1].max() + m),
        )

    def to_dict(self) -> dict:
        return {
            "bead_intensity": self.bead_intensity,
            "surface_intensity": self.surface_intensity,
            "background_intensity": self.background_intensity,
            "specular_count": self.specular_count,
            "specular_size_range": list(self.specular_size_range),
            "specular_eccentricity_range": list(self.specular_eccentricity_range),
            "specular_intensity": self.specular_intensity,
            "noise_sigma": self.noise_sigma,
            "supersampling": self.supersampling,
            "plate_margin": self.plate_margin,
            "occluded_markers": list(self.occluded_markers),
        }

    @classmethod
    def from_dict(cls, data: dict, target: TargetModel | None = None) -> "SceneConfig":
        kwargs = {k: data[k] for k in (
            "bead_intensity", "surface_intensity", "background_intensity",
            "specular_count", "specular_intensity", "noise_sigma",
            "supersampling", "plate_margin",
        ) if k in data}
        if "specular_size_range" in data:
            kwargs["specular_size_range"] = tuple(data["specular_size_range"])
        if "specular_eccentricity_range" in data:
            kwargs["specular_eccentricity_range"] = tuple(data["specular_eccentricity_range"])
        if "occluded_markers" in data:
            kwargs["occluded_markers"] = tuple(data["occluded_markers"])
        if target is not None:
            kwargs["target"] = target
        return cls(**kwargs)


# -- rendering -----------------------------------------------------------------

def _undistort_grid(view: CameraView, px: np.ndarray, py: np.ndarray):
    """Fixed-iteration undistortion for rendering (no convergence raise)."""
    k = view.intrinsics
    x_obs = (px - k.cx) / k.fx
    y_obs = (py - k.cy) / k.fy
    if view.distortion.is_zero:
        return x_obs, y_obs
    d = view.distortion
    x, y = x_obs.copy(), y_obs.copy()
    for _ in range(15):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (d.k1 + r2 * (d.k2 + r2 * d.k3))
        dx = 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x)
        dy = d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y
        x = (x_obs - dx) / radial
        y = (y_obs - dy) / radial
    return x, y


def _plane_coords(view: CameraView, pose: RigidTransform, px: np.ndarray, py: np.ndarray):
    """Map pixel coordinates to target-plane coordinates via ray casting.

    Returns (qx, qy, valid); invalid rays point away from the plane.
    """
    x, y = _undistort_grid(view, px.astype(float), py.astype(float))
    normal = pose.rotation[:, 2]
    offset = float(normal @ pose.translation)
    denom = normal[0] * x + normal[1] * y + normal[2]
    safe = np.abs(denom) > 1e-12
    s = np.where(safe, offset / np.where(safe, denom, 1.0), -1.0)
    valid = safe & (s > 0)
    hit_x = s * x - pose.translation[0]
    hit_y = s * y - pose.translation[1]
    hit_z = s - pose.translation[2]
    r = pose.rotation
    qx = r[0, 0] * hit_x + r[1, 0] * hit_y + r[2, 0] * hit_z
    qy = r[0, 1] * hit_x + r[1, 1] * hit_y + r[2, 1] * hit_z
    return qx, qy, valid


def _pixel_bbox(view: CameraView, points_px: np.ndarray, pad: float):
    k = view.intrinsics
    x0 = int(np.floor(points_px[:, 0].min() - pad))
    x1 = int(np.ceil(points_px[:, 0].max() + pad))
    y0 = int(np.floor(points_px[:, 1].min() - pad))
    y1 = int(np.ceil(points_px[:, 1].max() + pad))
    x0, x1 = max(0, x0), min(k.width - 1, x1)
    y0, y1 = max(0, y0), min(k.height - 1, y1)
    if x0 > x1 or y0 > y1:
        return None
    return x0, y0, x1, y1


def _supersample_offsets(s: int) -> np.ndarray:
    return (np.arange(s) + 0.5) / s - 0.5


def _coverage_patch(
    view: CameraView,
    pose: RigidTransform,
    bbox: tuple[int, int, int, int],
    supersampling: int,
    inside_fn,
) -> np.ndarray:
    """Fraction of each pixel (in bbox) whose plane footprint satisfies inside_fn."""
    x0, y0, x1, y1 = bbox
    xs = np.arange(x0, x1 + 1, dtype=float)
    ys = np.arange(y0, y1 + 1, dtype=float)
    offs = _supersample_offsets(supersampling)
    sx = (xs[None, :, None] + offs[None, None, :]).reshape(1, -1)
    sy = (ys[:, None, None] + offs[None, None, :]).reshape(-1, 1)
    h = len(ys) * supersampling
    w = len(xs) * supersampling
    gx = np.broadcast_to(sx.reshape(1, w), (h, w))
    gy = np.broadcast_to(sy.reshape(h, 1), (h, w))
    qx, qy, valid = _plane_coords(view, pose, gx.ravel(), gy.ravel())
    inside = inside_fn(qx, qy) & valid
    inside = inside.reshape(len(ys), supersampling, len(xs), supersampling)
    return inside.mean(axis=(1, 3))


def render_view(
    scene: SceneConfig,
    target_pose: RigidTransform,
    view: CameraView,
    seed: int = 0,
) -> GrayImage:
    """Render one camera frame of the target.

    ``target_pose`` maps target coordinates into this camera's frame. The
    same seed with the same inputs yields a bit-identical frame.
    """
    model = scene.target
    k = view.intrinsics
    pts_cam = target_pose.apply(model.marker_positions)
    if np.any(pts_cam[:, 2] <= 0):
        raise TargetBehindCamera("marker(s) at non-positive depth")
    rng = np.random.default_rng(seed)
    canvas = np.full((k.height, k.width), float(scene.background_intensity))

    # plate fill (hard-edged; its edge sits far below the detection threshold)
    rx0, ry0, rx1, ry1 = scene.plate_rect()
    corners = np.array([
        [rx0, ry0, 0.0], [rx1, ry0, 0.0], [rx1, ry1, 0.0], [rx0, ry1, 0.0],
    ])
    corners_cam = target_pose.apply(corners)
    if np.any(corners_cam[:, 2] <= 0):
        raise TargetBehindCamera("plate corner at non-positive depth")
    corner_px = project(view, corners_cam)
    span = max(float(np.ptp(corner_px[:, 0])), float(np.ptp(corner_px[:, 1])))
    bbox = _pixel_bbox(view, corner_px, pad=0.1 * span + 8)
    if bbox is not None:
        x0, y0, x1, y1 = bbox
        gx, gy = np.meshgrid(
            np.arange(x0, x1 + 1, dtype=float), np.arange(y0, y1 + 1, dtype=float)
        )
        qx, qy, valid = _plane_coords(view, target_pose, gx.ravel(), gy.ravel())
        on_plate = valid & (qx >= rx0) & (qx <= rx1) & (qy >= ry0) & (qy <= ry1)
        patch = canvas[y0:y1 + 1, x0:x1 + 1]
        patch[on_plate.reshape(patch.shape)] = float(scene.surface_intensity)

    # specular false blobs: elongated bright ellipses on the plate, kept away
    # from the markers so they never merge with a real cluster
    spec_params = _place_speculars(scene, rng)
    for (cx_mm, cy_mm, major, minor, phi) in spec_params:
        _paint_ellipse(
            canvas, scene, view, target_pose,
            cx_mm, cy_mm, major, minor, phi, float(scene.specular_intensity),
        )

    # beads: supersampled coverage of each hole disc
    bead_r = model.bead_diameter / 2.0
    for m_idx, marker in enumerate(model.marker_positions):
        if m_idx in scene.occluded_markers:
            continue
        for off in model.bead_offsets:
            bx, by = marker[0] + off[0], marker[1] + off[1]
            _paint_ellipse(
                canvas, scene, view, target_pose,
                bx, by, bead_r, bead_r, 0.0, float(scene.bead_intensity),
            )

    if scene.noise_sigma > 0:
        canvas = canvas + rng.normal(0.0, scene.noise_sigma, canvas.shape)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def _paint_ellipse(canvas, scene, view, pose, cx_mm, cy_mm, a_mm, b_mm, phi, intensity):
    """Blend an in-plane ellipse onto the canvas with coverage weighting."""
    center_cam = pose.apply(np.array([cx_mm, cy_mm, 0.0]))
    if center_cam[2] <= 0:
        return
    center_px = project(view, center_cam)
    scale = view.intrinsics.fx / center_cam[2]
    pad = max(a_mm, b_mm) * scale * 1.8 + 3.0
    bbox = _pixel_bbox(view, center_px[None, :], pad=pad)
    if bbox is None:
        return
    cos_p, sin_p = math.cos(phi), math.sin(phi)

    def inside(qx, qy):
        dx = qx - cx_mm
        dy = qy - cy_mm
        u = dx * cos_p + dy * sin_p
        v = -dx * sin_p + dy * cos_p
        return (u / a_mm) ** 2 + (v / b_mm) ** 2 <= 1.0

    cov = _coverage_patch(view, pose, bbox, scene.supersampling, inside)
    x0, y0, x1, y1 = bbox
    patch = canvas[y0:y1 + 1, x0:x1 + 1]
    np.maximum(patch, patch * (1.0 - cov) + intensity * cov, out=patch)


def _place_speculars(scene: SceneConfig, rng: np.random.Generator):
    """Sample specular ellipse parameters on the plate, away from markers."""
    out = []
    if scene.specular_count <= 0:
        return out
    rx0, ry0, rx1, ry1 = scene.plate_rect()
    markers = scene.target.plane_points()
    clearance = 40.0   # mm centre-to-centre from any marker
    for _ in range(scene.specular_count):
        for _attempt in range(100):
            cx = rng.uniform(rx0 + 5, rx1 - 5)
            cy = rng.uniform(ry0 + 5, ry1 - 5)
            if np.min(np.hypot(markers[:, 0] - cx, markers[:, 1] - cy)) >= clearance:
                major = rng.uniform(*scene.specular_size_range)
                ecc = rng.uniform(*scene.specular_eccentricity_range)
                minor = major * math.sqrt(1.0 - ecc * ecc)
                phi = rng.uniform(0, math.pi)
                out.append((cx, cy, major, minor, phi))
                break
    return out


# -- default rig ----------------------------------------------------------------

def default_hand_eye() -> RigidTransform:
    """Camera mounted beside the tool, tilted slightly toward it."""
    return RigidTransform(rotation_from_rotvec([0.0, math.radians(3.0), 0.0]),
                          [60.0, -40.0, 20.0])


def default_tool_offset() -> RigidTransform:
    """Pin tip 150 mm along the TCP z-axis."""
    return RigidTransform(np.eye(3), [0.0, 0.0, 150.0])


def default_target_in_base() -> RigidTransform:
    return RigidTransform(np.eye(3), [800.0, 150.0, 600.0])


def make_default_rig(
    scale: int = 1,
    baseline_mm: float = 200.0,
    distortion: DistortionModel | None = None,
    hand_eye: RigidTransform | None = None,
) -> Rig:
    """Stereo rig: 640x400 at 82 degrees (x ``scale``), 200 mm baseline.

    ``scale`` 3 gives the native 1920x1200 mode of the lab cameras.
    """
    intr = CameraIntrinsics(
        fx=BASE_FOCAL * scale, fy=BASE_FOCAL * scale,
        cx=BASE_WIDTH * scale / 2.0, cy=BASE_HEIGHT * scale / 2.0,
        width=BASE_WIDTH * scale, height=BASE_HEIGHT * scale,
    )
    dist = distortion or DistortionModel()
    # right camera sits +baseline along the reference x-axis, so reference
    # coordinates shift by -baseline when expressed in it
    right_extr = RigidTransform(np.eye(3), [-baseline_mm, 0.0, 0.0])
    cameras = [
        CameraView(intr, dist),
        CameraView(intr, dist, right_extr),
    ]
    return Rig(cameras=cameras, hand_eye=hand_eye or default_hand_eye())


# -- pose sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class PoseLimits:
    """Sampling limits of the accuracy protocol."""

    distance_range: tuple[float, float] = (300.0, 500.0)   # mm
    max_x: float = 50.0        # horizontal displacement, mm
    max_y: float = 100.0       # vertical displacement, mm
    max_rotation_deg: float = 10.0

    def __post_init__(self):
        if self.distance_range[0] > self.distance_range[1]:
            raise SchemaError("distance_range", "min above max")

    def to_dict(self) -> dict:
        return {
            "distance_range": list(self.distance_range),
            "max_x": self.max_x,
            "max_y": self.max_y,
            "max_rotation_deg": self.max_rotation_deg,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PoseLimits":
        kwargs = dict(data)
        if "distance_range" in kwargs:
            kwargs["distance_range"] = tuple(kwargs["distance_range"])
        return cls(**kwargs)


_SAMPLE_TRIES = 2000


def sample_test_pose(
    limits: PoseLimits,
    rng: np.random.Generator | int,
    views: list[CameraView],
    model: TargetModel,
    margin_px: float = 8.0,
) -> RigidTransform:
    """Uniformly sample a target-in-reference-camera pose within limits.

    Samples are rejected until every marker projects inside every camera
    with ``margin_px`` to spare.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    a = math.radians(limits.max_rotation_deg)
    for _ in range(_SAMPLE_TRIES):
        angles = rng.uniform(-a, a, size=3)
        rot = (
            rotation_from_rotvec([0.0, 0.0, angles[2]])
            @ rotation_from_rotvec([0.0, angles[1], 0.0])
            @ rotation_from_rotvec([angles[0], 0.0, 0.0])
        )
        t = np.array([
            rng.uniform(-limits.max_x, limits.max_x),
            rng.uniform(-limits.max_y, limits.max_y),
            rng.uniform(*limits.distance_range),
        ])
        pose = RigidTransform(rot, t)
        if _fully_visible(pose, views, model, margin_px):
            return pose
    raise LimitsInfeasible(f"no visible pose within limits after {_SAMPLE_TRIES} tries")


def _fully_visible(pose, views, model, margin_px):
    extent = model.marker_disc_diameter / 2.0
    for view in views:
        cam_pose = compose(view.camera_from_reference, pose)
        pts = cam_pose.apply(model.marker_positions)
        if np.any(pts[:, 2] <= 0):
            return False
        pix = project(view, pts)
        disc_px = extent * view.intrinsics.fx / pts[:, 2] + margin_px
        k = view.intrinsics
        ok = (
            (pix[:, 0] - disc_px >= 0) & (pix[:, 0] + disc_px <= k.width - 1)
            & (pix[:, 1] - disc_px >= 0) & (pix[:, 1] + disc_px <= k.height - 1)
        )
        if not np.all(ok):
            return False
    return True


# -- robot ------------------------------------------------------------------------

@dataclass
class RobotSim:
    """Ideal-actuation robot with configurable reporting errors.

    The actual TCP pose is always exact internally; the reported pose is
    ``report_bias o noise o actual``.
    """

    hand_eye: RigidTransform = field(default_factory=default_hand_eye)
    target_in_base: RigidTransform = field(default_factory=default_target_in_base)
    tcp_pose: RigidTransform = field(default_factory=RigidTransform)
    report_bias: RigidTransform = field(default_factory=RigidTransform)
    report_noise_t_mm: float = 0.0
    report_noise_r_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    # spec ops ------------------------------------------------------------

    def move_tcp(self, command: RigidTransform) -> None:
        """Ideal actuation: the actual pose becomes the command exactly."""
        self.tcp_pose = command

    def report_tcp(self) -> RigidTransform:
        noise = RigidTransform()
        if self.report_noise_t_mm > 0 or self.report_noise_r_deg > 0:
            rv = self._rng.normal(0.0, math.radians(self.report_noise_r_deg), 3)
            dt = self._rng.normal(0.0, self.report_noise_t_mm, 3)
            noise = RigidTransform(rotation_from_rotvec(rv), dt)
        return compose(self.report_bias, compose(noise, self.tcp_pose))

    # camera/target chains --------------------------------------------------

    def camera_from_target(self, view: CameraView | None = None) -> RigidTransform:
        """True target pose in the given camera's frame (reference by default)."""
        base_from_cam0 = compose(self.tcp_pose, self.hand_eye)
        pose0 = compose(invert(base_from_cam0), self.target_in_base)
        if view is None:
            return pose0
        return compose(view.camera_from_reference, pose0)

    def move_camera_to(self, cam0_from_target: RigidTransform) -> None:
        """Place the TCP so the reference camera sees the given target pose."""
        base_from_cam0 = compose(self.target_in_base, invert(cam0_from_target))
        self.move_tcp(compose(base_from_cam0, invert(self.hand_eye)))


def move_tcp(sim: RobotSim, command: RigidTransform) -> RobotSim:
    sim.move_tcp(command)
    return sim


def robot_report_tcp(sim: RobotSim) -> RigidTransform:
    return sim.report_tcp()


@dataclass(frozen=True)
class InsertionResult:
    success: bool
    lateral_mm: float
    angle_deg: float

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "lateral_mm": self.lateral_mm,
            "angle_deg": self.angle_deg,
        }


def check_insertion(
    sim: RobotSim,
    tool_offset: RigidTransform | None = None,
    tolerance_mm: float = 3.0,
    tolerance_deg: float = 2.0,
) -> InsertionResult:
    """Score the pin-tool alignment against the true slot pose.

    The slot axis is the target z-axis through the target origin; the pin
    axis is the tool z-axis. Success requires the axis-plane intersection
    within ``tolerance_mm`` of the slot centre and the axes within
    ``tolerance_deg``.
    """
    tool_offset = tool_offset or default_tool_offset()
    target_from_tool = compose(
        invert(sim.target_in_base), compose(sim.tcp_pose, tool_offset)
    )
    axis = target_from_tool.rotation[:, 2]
    origin = target_from_tool.translation
    angle = math.degrees(math.acos(max(-1.0, min(1.0, float(axis[2])))))
    if abs(axis[2]) < 1e-6:
        return InsertionResult(False, float("inf"), angle)
    s = -origin[2] / axis[2]
    hit = origin + s * axis
    lateral = float(np.hypot(hit[0], hit[1]))
    success = lateral <= tolerance_mm and angle <= tolerance_deg
    return InsertionResult(success, lateral, angle)


# -- calibration capture ----------------------------------------------------------

def sample_calibration_poses(
    sim: RobotSim,
    count: int = 20,
    seed: int = 0,
    rotation_spread_deg: float = 30.0,
    noise_t_mm: float = 0.0,
    noise_r_deg: float = 0.0,
):
    """Synthetic hand-eye capture sweep: TCP poses with well-spread axes.

    Returns (robot_pose, camera_pose) pairs consistent with the simulator's
    true hand-eye and target placement, optionally perturbed.
    """
    from .calibration import PosePair

    rng = np.random.default_rng(seed)
    base_cam_pose = RigidTransform(np.eye(3), [0.0, 0.0, 400.0])
    pairs = []
    for _ in range(count):
        rv = rng.normal(size=3)
        rv = rv / np.linalg.norm(rv) * rng.uniform(
            math.radians(5.0), math.radians(rotation_spread_deg)
        )
        jitter = RigidTransform(rotation_from_rotvec(rv), rng.uniform(-60, 60, 3))
        cam_pose = compose(jitter, base_cam_pose)
        sim.move_camera_to(cam_pose)
        camera_pose = sim.camera_from_target()
        if noise_t_mm > 0 or noise_r_deg > 0:
            dr = rotation_from_rotvec(rng.normal(0, math.radians(noise_r_deg), 3))
            camera_pose = RigidTransform(
                dr @ camera_pose.rotation,
                camera_pose.translation + rng.normal(0, noise_t_mm, 3),
            )
        pairs.append(PosePair(robot_pose=sim.report_tcp(), camera_pose=camera_pose))
    return pairs
