"""Camera-target pose estimation from planar correspondences.

Initialization decomposes a normalized-DLT homography; refinement is a
Levenberg-Marquardt minimization of the pixel reprojection error with an
axis-angle + translation increment parameterization. Mono, stereo, and the
two multiview variants all share the same residual machinery.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .detection import DetectionParams, detect_markers, identify_markers
from .errors import (
    BehindCamera,
    DegenerateConfiguration,
    DivergedBehindCamera,
    ExtrinsicsMissing,
    GateFailed,
    InsufficientViews,
    MarkerPoseError,
    SingularNormalEquations,
)
from .geometry import (
    CameraIntrinsics,
    CameraView,
    RigidTransform,
    average_rotations,
    compose,
    invert,
    project_to_so3,
    rotation_from_rotvec,
)
from .images import GrayImage
from .target import TargetModel


@dataclass(frozen=True)
class Correspondences:
    """Index-aligned 2D-3D matches for one view.

    ``image_points`` are ideal (undistorted) pixel coordinates; the view's
    ``camera_from_reference`` places the camera relative to the reference
    frame the pose is expressed in.
    """

    image_points: np.ndarray    # (N, 2)
    model_points: np.ndarray    # (N, 3), mm
    view: CameraView

    def __post_init__(self):
        img = np.asarray(self.image_points, dtype=float).reshape(-1, 2)
        mod = np.asarray(self.model_points, dtype=float).reshape(-1, 3)
        if len(img) != len(mod):
            raise ValueError(f"{len(img)} image points vs {len(mod)} model points")
        if len(img) < 4:
            raise ValueError("at least 4 correspondences are required")
        object.__setattr__(self, "image_points", img)
        object.__setattr__(self, "model_points", mod)


@dataclass(frozen=True)
class PoseEstimate:
    """Pose of the target in camera coordinates plus refinement diagnostics."""

    pose: RigidTransform                 # maps target coords into the (reference) camera frame
    mean_reprojection_error: float       # px
    max_reprojection_error: float        # px
    iterations: int
    converged: bool
    cost_history: list[float] = field(default_factory=list)  # accepted-step costs

    def to_dict(self) -> dict:
        return {
            "rotation": self.pose.rotation.tolist(),
            "translation_mm": self.pose.translation.tolist(),
            "mean_reprojection_error_px": self.mean_reprojection_error,
            "max_reprojection_error_px": self.max_reprojection_error,
            "iterations": self.iterations,
            "converged": self.converged,
        }


# -- homography ---------------------------------------------------------------

def _normalization(points: np.ndarray) -> np.ndarray:
    """Hartley similarity: centroid to origin, mean distance sqrt(2)."""
    centroid = points.mean(axis=0)
    dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    if dist == 0:
        raise DegenerateConfiguration("coincident points")
    s = np.sqrt(2.0) / dist
    return np.array([
        [s, 0.0, -s * centroid[0]],
        [0.0, s, -s * centroid[1]],
        [0.0, 0.0, 1.0],
    ])


def estimate_homography(points_2d: np.ndarray, points_plane: np.ndarray) -> np.ndarray:
    """Normalized DLT mapping plane coordinates (mm) to pixels, h33 = 1."""
    img = np.asarray(points_2d, dtype=float).reshape(-1, 2)
    pln = np.asarray(points_plane, dtype=float).reshape(-1, 2)
    if len(img) != len(pln) or len(img) < 4:
        raise DegenerateConfiguration("need at least 4 paired points")
    t_img = _normalization(img)
    t_pln = _normalization(pln)
    img_h = (np.column_stack([img, np.ones(len(img))]) @ t_img.T)
    pln_h = (np.column_stack([pln, np.ones(len(pln))]) @ t_pln.T)
    a = np.zeros((2 * len(img), 9))
    a[0::2, 0:3] = pln_h
    a[0::2, 6:9] = -img_h[:, [0]] * pln_h
    a[1::2, 3:6] = pln_h
    a[1::2, 6:9] = -img_h[:, [1]] * pln_h
    _, sv, vt = np.linalg.svd(a)
    # rank 8 is required for a unique solution; collinear/degenerate
    # configurations leave the nullspace more than one-dimensional
    if sv[7] < 1e-9 * sv[0]:
        raise DegenerateConfiguration(
            f"design matrix rank-deficient (sigma8/sigma1 = {sv[7] / sv[0]:.2e})"
        )
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_img) @ h_norm @ t_pln
    if abs(h[2, 2]) < 1e-12 * np.abs(h).max():
        raise DegenerateConfiguration("h33 vanishes; cannot normalize")
    return h / h[2, 2]


def apply_homography(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.column_stack([points, np.ones(len(points))]) @ h.T
    return pts[:, :2] / pts[:, [2]]


def decompose_homography(h: np.ndarray, intrinsics: CameraIntrinsics) -> RigidTransform:
    """Recover the plane pose from a calibrated homography.

    With ``B = K^-1 H = [b1 b2 b3]``: the rotation columns are ``lam*b1``,
    ``lam*b2`` and their cross product with ``lam = 2/(|b1|+|b2|)``, the
    translation is ``lam*b3``; the sign is chosen to put the plane at
    positive depth and the rotation is projected onto SO(3).
    """
    b = np.linalg.inv(intrinsics.matrix) @ np.asarray(h, dtype=float)
    n1 = np.linalg.norm(b[:, 0])
    n2 = np.linalg.norm(b[:, 1])
    if n1 == 0 or n2 == 0:
        raise DegenerateConfiguration("homography column collapses under K^-1")
    lam = 2.0 / (n1 + n2)
    for sign in (1.0, -1.0):
        t = sign * lam * b[:, 2]
        if t[2] > 0:
            r1 = sign * lam * b[:, 0]
            r2 = sign * lam * b[:, 1]
            r3 = np.cross(r1, r2)
            rot = project_to_so3(np.column_stack([r1, r2, r3]))
            return RigidTransform(rot, t)
    raise BehindCamera("both sign choices place the plane at non-positive depth")


# -- Levenberg-Marquardt refinement --------------------------------------------

_LM_LAMBDA0 = 1e-3
_LM_MAX_ITERS = 100
_LM_COST_TOL = 1e-12    # relative cost change
_LM_STEP_TOL = 1e-10    # parameter step norm
_LM_FD_STEP = 1e-6      # central-difference step
_LM_LAMBDA_MAX = 1e14


def _pose_with_increment(pose: RigidTransform, delta: np.ndarray) -> RigidTransform:
    """Left-multiplicative axis-angle increment plus translation increment."""
    return RigidTransform(
        rotation_from_rotvec(delta[:3]) @ pose.rotation,
        pose.translation + delta[3:6],
    )


class _MultiViewProblem:
    """Residual stack over one or more views of the planar target.

    Parameter layout: 6 increments for the target pose in the reference
    frame, then 6 per free view (multiview method 2) for that view's
    camera-from-reference correction. View 0 is never free (gauge).
    """

    def __init__(self, corrs: list[Correspondences], free_views: bool):
        self.corrs = corrs
        self.free = [free_views and i > 0 for i in range(len(corrs))]
        self.n_params = 6 + 6 * sum(self.free)
        self.pinholes = [
            (c.view.intrinsics.fx, c.view.intrinsics.fy,
             c.view.intrinsics.cx, c.view.intrinsics.cy)
            for c in corrs
        ]

    def residuals(self, pose: RigidTransform, view_poses: list[RigidTransform]):
        """Stacked pixel residuals, or None if any point loses depth."""
        chunks = []
        for corr, cfr, (fx, fy, cx, cy) in zip(self.corrs, view_poses, self.pinholes):
            rot = cfr.rotation @ pose.rotation
            t = cfr.rotation @ pose.translation + cfr.translation
            pts = corr.model_points @ rot.T + t
            z = pts[:, 2]
            if np.any(z <= 0):
                return None
            pix = np.stack([fx * pts[:, 0] / z + cx, fy * pts[:, 1] / z + cy], axis=1)
            chunks.append((pix - corr.image_points).ravel())
        return np.concatenate(chunks)

    def unpack(self, params: np.ndarray, pose0: RigidTransform,
               views0: list[RigidTransform]):
        pose = _pose_with_increment(pose0, params[:6])
        views = []
        k = 6
        for base, free in zip(views0, self.free):
            if free:
                views.append(_pose_with_increment(base, params[k:k + 6]))
                k += 6
            else:
                views.append(base)
        return pose, views


def _finite_difference_jacobian(fun, params: np.ndarray, step: float = _LM_FD_STEP) -> np.ndarray:
    base = fun(params)
    jac = np.zeros((len(base), len(params)))
    for j in range(len(params)):
        dp = np.zeros_like(params)
        dp[j] = step
        hi = fun(params + dp)
        lo = fun(params - dp)
        if hi is None or lo is None:
            raise DivergedBehindCamera("finite-difference probe left the visible region")
        jac[:, j] = (hi - lo) / (2.0 * step)
    return jac


def refine_pose_lm(
    init: RigidTransform,
    corrs: list[Correspondences],
    fixed_relative_views: bool = True,
    free_view_inits: list[RigidTransform] | None = None,
) -> PoseEstimate:
    """Minimize the total squared reprojection error over all views.

    ``init`` is the target pose in the reference frame. With
    ``fixed_relative_views`` the per-view mounting transforms stay frozen;
    otherwise every view except the first is refined jointly with the pose
    (gauge fixed at view 0). Image points must already be undistorted.
    """
    if isinstance(corrs, Correspondences):
        corrs = [corrs]
    problem = _MultiViewProblem(corrs, free_views=not fixed_relative_views)
    views0 = [c.view.camera_from_reference for c in corrs]
    if free_view_inits is not None:
        views0 = [views0[0]] + list(free_view_inits[1:])

    def residuals_at(params: np.ndarray):
        pose, views = problem.unpack(params, init, views0)
        return problem.residuals(pose, views)

    params = np.zeros(problem.n_params)
    res = residuals_at(params)
    if res is None:
        raise DivergedBehindCamera("initial pose puts model points behind a camera")
    cost = float(res @ res)
    history = [cost]
    lam = _LM_LAMBDA0
    iterations = 0
    converged = False
    while iterations < _LM_MAX_ITERS:
        iterations += 1
        jac = _finite_difference_jacobian(residuals_at, params)
        jtj = jac.T @ jac
        jtr = jac.T @ res
        accepted = False
        while lam <= _LM_LAMBDA_MAX:
            try:
                step = np.linalg.solve(jtj + lam * np.eye(problem.n_params), -jtr)
            except np.linalg.LinAlgError as exc:
                raise SingularNormalEquations(str(exc)) from exc
            candidate = params + step
            res_new = residuals_at(candidate)
            if res_new is not None:
                cost_new = float(res_new @ res_new)
                if cost_new < cost:
                    rel_change = (cost - cost_new) / max(cost, 1e-300)
                    params, res, cost = candidate, res_new, cost_new
                    history.append(cost)
                    lam = max(lam / 10.0, 1e-12)
                    accepted = True
                    if rel_change < _LM_COST_TOL or np.linalg.norm(step) < _LM_STEP_TOL:
                        converged = True
                    break
            lam *= 10.0
        if not accepted:
            # no improving step at any damping: treat as converged-in-place
            converged = True
            break
        if converged:
            break
    else:
        converged = False

    pose, _ = problem.unpack(params, init, views0)
    per_point = np.linalg.norm(res.reshape(-1, 2), axis=1)
    return PoseEstimate(
        pose=pose,
        mean_reprojection_error=float(per_point.mean()),
        max_reprojection_error=float(per_point.max()),
        iterations=iterations,
        converged=converged,
        cost_history=history,
    )


def reprojection_gate(est: PoseEstimate, threshold: float = 2.0) -> bool:
    """True when the estimate clears the mean-reprojection-error gate."""
    return est.mean_reprojection_error <= threshold


# -- full estimators ------------------------------------------------------------

DEFAULT_GATE_PX = 2.0


def _correspondences_from_frame(
    img: GrayImage,
    view: CameraView,
    model: TargetModel,
    params: DetectionParams,
) -> Correspondences:
    detections = detect_markers(img, view, params)
    matched = identify_markers(
        detections.centroids, model,
        blobs_before=detections.blobs_before,
        blobs_after=detections.blobs_after,
    )
    return Correspondences(
        image_points=matched.centroids,
        model_points=model.marker_positions,
        view=view,
    )


def _initial_pose(corr: Correspondences) -> RigidTransform:
    h = estimate_homography(corr.image_points, corr.model_points[:, :2])
    return decompose_homography(h, corr.view.intrinsics)


def estimate_pose_from_correspondences(
    corr: Correspondences,
    gate_threshold: float = DEFAULT_GATE_PX,
) -> PoseEstimate:
    """Mono estimation core: homography init, LM refinement, gate.

    The pose comes back in the camera's own frame regardless of rig
    mounting.
    """
    init = _initial_pose(corr)
    local_view = CameraView(corr.view.intrinsics, corr.view.distortion)
    est = refine_pose_lm(
        init, [Correspondences(corr.image_points, corr.model_points, local_view)]
    )
    if not reprojection_gate(est, gate_threshold):
        raise GateFailed(est, gate_threshold)
    return est


def estimate_pose_mono(
    img: GrayImage,
    view: CameraView,
    model: TargetModel,
    params: DetectionParams | None = None,
    gate_threshold: float = DEFAULT_GATE_PX,
) -> PoseEstimate:
    """Single-frame pipeline: detect, identify, initialize, refine, gate."""
    params = params or DetectionParams(expected_count=model.marker_count)
    corr = _correspondences_from_frame(img, view, model, params)
    return estimate_pose_from_correspondences(corr, gate_threshold)


def estimate_pose_stereo_from_correspondences(
    corr_l: Correspondences,
    corr_r: Correspondences,
    gate_threshold: float = DEFAULT_GATE_PX,
) -> PoseEstimate:
    """Stereo core: per-camera initialization averaged, joint refinement.

    The initial pose maps both mono initializations into the reference
    camera frame and takes the per-axis translation mean plus the
    quaternion mean of the rotations; the joint optimization keeps the
    extrinsics fixed.
    """
    init_candidates = []
    for corr in (corr_l, corr_r):
        local = _initial_pose(corr)
        init_candidates.append(compose(invert(corr.view.camera_from_reference), local))
    init = RigidTransform(
        average_rotations([c.rotation for c in init_candidates]),
        np.mean([c.translation for c in init_candidates], axis=0),
    )
    est = refine_pose_lm(init, [corr_l, corr_r], fixed_relative_views=True)
    if not reprojection_gate(est, gate_threshold):
        raise GateFailed(est, gate_threshold)
    return est


def estimate_pose_stereo(
    left: GrayImage,
    right: GrayImage,
    views: tuple[CameraView, CameraView],
    model: TargetModel,
    params: DetectionParams | None = None,
    gate_threshold: float = DEFAULT_GATE_PX,
) -> PoseEstimate:
    """Stereo pipeline over a left/right frame pair."""
    params = params or DetectionParams(expected_count=model.marker_count)
    view_l, view_r = views
    if view_r is None:
        raise ExtrinsicsMissing("stereo estimation needs a second camera view")
    corr_l = _correspondences_from_frame(left, view_l, model, params)
    corr_r = _correspondences_from_frame(right, view_r, model, params)
    return estimate_pose_stereo_from_correspondences(corr_l, corr_r, gate_threshold)


def estimate_pose_multiview_from_correspondences(
    items: list[tuple[Correspondences, RigidTransform]],
    method: int = 1,
    gate_threshold: float = DEFAULT_GATE_PX,
) -> PoseEstimate:
    """Multiview core over (correspondences, camera pose in base) pairs.

    Method 1 trusts the reported relative camera poses and optimizes only
    the 6-DoF target pose; method 2 re-optimizes every camera pose except
    the first, which fixes the gauge. The result is expressed in the
    frame-0 camera.
    """
    if method not in (1, 2):
        raise ValueError(f"method must be 1 or 2, got {method}")
    min_frames = 1 if method == 1 else 2
    if len(items) < min_frames:
        raise InsufficientViews(f"method {method} needs at least {min_frames} frame(s)")
    cam0 = items[0][1]
    corrs: list[Correspondences] = []
    locals_: list[RigidTransform] = []
    init_candidates = []
    for corr, base_from_cam in items:
        cam_from_cam0 = compose(invert(base_from_cam), cam0)
        corrs.append(Correspondences(
            corr.image_points, corr.model_points,
            CameraView(corr.view.intrinsics, corr.view.distortion, cam_from_cam0),
        ))
        local_pose = _initial_pose(corr)
        locals_.append(local_pose)
        init_candidates.append(compose(invert(cam_from_cam0), local_pose))
    init = RigidTransform(
        average_rotations([c.rotation for c in init_candidates]),
        np.mean([c.translation for c in init_candidates], axis=0),
    )
    if method == 1:
        est = refine_pose_lm(init, corrs, fixed_relative_views=True)
    else:
        # method 2 ignores the reported relative poses beyond initialization
        init = init_candidates[0]
        free_inits = [compose(local, invert(init)) for local in locals_]
        est = refine_pose_lm(
            init, corrs, fixed_relative_views=False, free_view_inits=free_inits,
        )
    if not reprojection_gate(est, gate_threshold):
        raise GateFailed(est, gate_threshold)
    return est


def estimate_pose_multiview(
    frames: list[tuple[GrayImage, RigidTransform]],
    view: CameraView,
    hand_eye: RigidTransform,
    model: TargetModel,
    params: DetectionParams | None = None,
    method: int = 1,
    gate_threshold: float = DEFAULT_GATE_PX,
) -> PoseEstimate:
    """Fuse several frames taken by one camera from different robot poses.

    ``frames`` pairs each image with the TCP pose (base frame) the robot
    reported for it; ``hand_eye`` maps camera coordinates into the TCP
    frame. A frame whose detection fails is dropped with a warning as long
    as at least two frames remain; otherwise the error propagates.
    """
    if method not in (1, 2):
        raise ValueError(f"method must be 1 or 2, got {method}")
    params = params or DetectionParams(expected_count=model.marker_count)
    min_frames = 1 if method == 1 else 2
    if len(frames) < min_frames:
        raise InsufficientViews(f"method {method} needs at least {min_frames} frame(s)")

    items: list[tuple[Correspondences, RigidTransform]] = []
    failures: list[tuple[int, MarkerPoseError]] = []
    for idx, (img, tcp_pose) in enumerate(frames):
        base_from_cam = compose(tcp_pose, hand_eye)
        try:
            corr = _correspondences_from_frame(img, view, model, params)
        except MarkerPoseError as exc:
            failures.append((idx, exc))
            continue
        items.append((corr, base_from_cam))
    if failures:
        if len(items) >= max(min_frames, 2):
            for idx, exc in failures:
                warnings.warn(f"dropping frame {idx}: {exc}", stacklevel=2)
        else:
            raise failures[0][1]
    return estimate_pose_multiview_from_correspondences(items, method, gate_threshold)
