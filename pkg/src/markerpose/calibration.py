"""Robot-world / hand-eye calibration and calibration-file handling.

Solves ``A_i X = Y B_i`` over absolute pose pairs: ``A_i`` is the reported
TCP pose (base frame), ``B_i`` the inverse of the vision estimate (target
frame from camera), ``X`` the camera mounting in the TCP frame, and ``Y``
the target pose in the base frame. Rotations come from the rank-1
structure of the summed Kronecker products, translations from a linear
least squares given the rotations.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateMotions,
    InvariantViolation,
    SchemaError,
    TooFewPairs,
)
from .geometry import (
    CameraIntrinsics,
    CameraView,
    DistortionModel,
    RigidTransform,
    compose,
    invert,
    orthonormality_error,
    project_to_so3,
)

CALIBRATION_SCHEMA_VERSION = 1

# the dominant singular value has multiplicity >= 2 exactly when the motion
# set leaves the rotation pair underdetermined (pure translations, a single
# rotation axis); solvable sets keep a measurable gap
_DEGENERACY_RATIO = 1.0 - 1e-6


@dataclass(frozen=True)
class PosePair:
    """One calibration capture: reported TCP pose and vision estimate."""

    robot_pose: RigidTransform     # TCP pose in the base frame
    camera_pose: RigidTransform    # target pose in the camera frame


@dataclass(frozen=True)
class HandEyeSolution:
    x: RigidTransform              # camera pose in the TCP frame
    y: RigidTransform              # target pose in the base frame
    residual: float                # RMS of ||A_i X - Y B_i|| over the pairs

    def __post_init__(self):
        if self.residual < 0:
            raise InvariantViolation("residual must be non-negative")


def _pair_matrices(pairs: list[PosePair]):
    a_list = [p.robot_pose for p in pairs]
    b_list = [invert(p.camera_pose) for p in pairs]
    return a_list, b_list


def solve_hand_eye(pairs: list[PosePair]) -> HandEyeSolution:
    """Closed-form simultaneous robot-world / hand-eye solution.

    Requires at least 3 pairs whose rotations are in general position;
    motion sets that leave the solution ambiguous (pure translations,
    a single rotation axis) raise :class:`DegenerateMotions`.
    """
    if len(pairs) < 3:
        raise TooFewPairs(f"need at least 3 pose pairs, got {len(pairs)}")
    a_list, b_list = _pair_matrices(pairs)

    # sum of Kronecker products: (R_Bi (x) R_Ai) vec(R_X) = vec(R_Y) per pair,
    # so noise-free T has vec(R_X), vec(R_Y) as its dominant singular pair
    t = np.zeros((9, 9))
    for a, b in zip(a_list, b_list):
        t += np.kron(b.rotation, a.rotation)
    u, sv, vt = np.linalg.svd(t)
    if sv[1] > _DEGENERACY_RATIO * sv[0]:
        raise DegenerateMotions(
            f"rotation system rank-deficient (sigma2/sigma1 = {sv[1] / sv[0]:.3f})"
        )
    vx = vt[0].reshape(3, 3, order="F")
    uy = u[:, 0].reshape(3, 3, order="F")
    det_vx = np.linalg.det(vx)
    det_uy = np.linalg.det(uy)
    if det_vx < 0:
        vx, uy = -vx, -uy
        det_vx, det_uy = -det_vx, -det_uy
    if det_uy <= 0:
        raise DegenerateMotions("inconsistent singular-vector orientation")
    r_x = project_to_so3(vx / np.cbrt(det_vx))
    r_y = project_to_so3(uy / np.cbrt(det_uy))

    # translations: R_Ai t_X - t_Y = R_Y t_Bi - t_Ai
    lhs = np.zeros((3 * len(pairs), 6))
    rhs = np.zeros(3 * len(pairs))
    for i, (a, b) in enumerate(zip(a_list, b_list)):
        lhs[3 * i : 3 * i + 3, 0:3] = a.rotation
        lhs[3 * i : 3 * i + 3, 3:6] = -np.eye(3)
        rhs[3 * i : 3 * i + 3] = r_y @ b.translation - a.translation
    sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    x = RigidTransform(r_x, sol[0:3])
    y = RigidTransform(r_y, sol[3:6])

    errs = []
    for a, b in zip(a_list, b_list):
        d = compose(a, x).as_matrix() - compose(y, b).as_matrix()
        errs.append(np.linalg.norm(d[:3, :]) ** 2)
    residual = float(np.sqrt(np.mean(errs)))
    return HandEyeSolution(x=x, y=y, residual=residual)


# -- calibration files ----------------------------------------------------------

@dataclass(frozen=True)
class Rig:
    """Camera views plus the hand-eye transform, as stored on disk."""

    cameras: list[CameraView]
    hand_eye: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if len(self.cameras) == 0:
            raise InvariantViolation("a rig needs at least one camera")
        ref = self.cameras[0].camera_from_reference
        if not ref.almost_equal(RigidTransform.identity(), tol=1e-9):
            raise InvariantViolation("reference camera extrinsic must be the identity")


def _transform_to_dict(t: RigidTransform) -> dict:
    return {"R": t.rotation.tolist(), "t": t.translation.tolist()}


def _transform_from_dict(data: dict, path: str) -> RigidTransform:
    try:
        r = np.array(data["R"], dtype=float)
        t = np.array(data["t"], dtype=float)
    except KeyError as exc:
        raise SchemaError(f"{path}.{exc.args[0]}", "missing field") from exc
    if r.shape != (3, 3) or t.shape != (3,):
        raise SchemaError(path, f"bad shapes R{r.shape} t{t.shape}")
    err = orthonormality_error(r)
    if err > 1e-6:
        raise InvariantViolation(f"{path}.R: orthonormality error {err:.2e}")
    if err > 1e-12:
        warnings.warn(f"{path}.R re-orthonormalized (drift {err:.2e})", stacklevel=2)
        r = project_to_so3(r)
    return RigidTransform(r, t)


def rig_to_dict(rig: Rig) -> dict:
    cameras = []
    for cam in rig.cameras:
        k = cam.intrinsics
        d = cam.distortion
        cameras.append({
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height,
            "dist": [d.k1, d.k2, d.k3, d.p1, d.p2],
            "extrinsic": _transform_to_dict(cam.camera_from_reference),
        })
    return {
        "version": CALIBRATION_SCHEMA_VERSION,
        "cameras": cameras,
        "hand_eye": _transform_to_dict(rig.hand_eye),
    }


def rig_from_dict(data: dict, source: str = "<dict>") -> Rig:
    if data.get("version") != CALIBRATION_SCHEMA_VERSION:
        raise SchemaError(f"{source}.version",
                          f"unsupported version {data.get('version')!r}")
    if "cameras" not in data or not isinstance(data["cameras"], list):
        raise SchemaError(f"{source}.cameras", "missing or not a list")
    cameras = []
    for i, cd in enumerate(data["cameras"]):
        path = f"{source}.cameras[{i}]"
        try:
            intr = CameraIntrinsics(
                fx=float(cd["fx"]), fy=float(cd["fy"]),
                cx=float(cd["cx"]), cy=float(cd["cy"]),
                width=int(cd["width"]), height=int(cd["height"]),
            )
            dist_coeffs = list(cd["dist"])
        except KeyError as exc:
            raise SchemaError(f"{path}.{exc.args[0]}", "missing field") from exc
        if len(dist_coeffs) != 5:
            raise SchemaError(f"{path}.dist", f"expected 5 coefficients, got {len(dist_coeffs)}")
        dist = DistortionModel(*[float(c) for c in dist_coeffs])
        extrinsic = _transform_from_dict(cd["extrinsic"], f"{path}.extrinsic")
        cameras.append(CameraView(intr, dist, extrinsic))
    if "hand_eye" not in data:
        raise SchemaError(f"{source}.hand_eye", "missing field")
    hand_eye = _transform_from_dict(data["hand_eye"], f"{source}.hand_eye")
    return Rig(cameras=cameras, hand_eye=hand_eye)


def save_calibration(rig: Rig, path: str | Path) -> None:
    """Write the rig with deterministic ordering and full double precision."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rig_to_dict(rig), f, indent=2)
        f.write("\n")


def load_calibration(path: str | Path) -> Rig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(str(path), f"invalid JSON: {exc}") from exc
    return rig_from_dict(data, source=str(path))


def pose_pairs_to_dict(pairs: list[PosePair]) -> dict:
    return {
        "version": 1,
        "pairs": [
            {
                "robot_pose": _transform_to_dict(p.robot_pose),
                "camera_pose": _transform_to_dict(p.camera_pose),
            }
            for p in pairs
        ],
    }


def pose_pairs_from_dict(data: dict, source: str = "<dict>") -> list[PosePair]:
    if "pairs" not in data:
        raise SchemaError(f"{source}.pairs", "missing field")
    out = []
    for i, pd in enumerate(data["pairs"]):
        path = f"{source}.pairs[{i}]"
        out.append(PosePair(
            robot_pose=_transform_from_dict(pd["robot_pose"], f"{path}.robot_pose"),
            camera_pose=_transform_from_dict(pd["camera_pose"], f"{path}.camera_pose"),
        ))
    return out
