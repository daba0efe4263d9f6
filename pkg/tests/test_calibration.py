import json
import math

import numpy as np
import pytest

from markerpose.calibration import (
    HandEyeSolution,
    PosePair,
    Rig,
    load_calibration,
    pose_pairs_from_dict,
    pose_pairs_to_dict,
    rig_from_dict,
    rig_to_dict,
    save_calibration,
    solve_hand_eye,
)
from markerpose.errors import (
    DegenerateMotions,
    InvariantViolation,
    SchemaError,
    TooFewPairs,
)
from markerpose.geometry import (
    CameraIntrinsics,
    CameraView,
    DistortionModel,
    RigidTransform,
    compose,
    invert,
    rotation_from_rotvec,
)


def random_transform(rng, angle_max=math.pi * 0.8, t_scale=200.0):
    v = rng.normal(size=3)
    v = v / np.linalg.norm(v) * rng.uniform(0.05, angle_max)
    return RigidTransform(rotation_from_rotvec(v), rng.normal(size=3) * t_scale)


def consistent_pairs(x, y, robot_poses, noise_t=0.0, noise_r=0.0, rng=None):
    """Build pose pairs satisfying A X = Y B exactly, then optionally perturb."""
    pairs = []
    for a in robot_poses:
        b = compose(invert(y), compose(a, x))          # target-from-camera
        camera_pose = invert(b)                        # camera estimate convention
        if noise_t > 0 or noise_r > 0:
            dr = rotation_from_rotvec(rng.normal(0, math.radians(noise_r), 3))
            camera_pose = RigidTransform(
                dr @ camera_pose.rotation,
                camera_pose.translation + rng.normal(0, noise_t, 3),
            )
        pairs.append(PosePair(robot_pose=a, camera_pose=camera_pose))
    return pairs


class TestSolveHandEye:
    def test_exact_recovery_many_ground_truths(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            x = random_transform(rng, t_scale=100.0)
            y = random_transform(rng, t_scale=500.0)
            robot = [random_transform(rng, t_scale=400.0) for _ in range(8)]
            sol = solve_hand_eye(consistent_pairs(x, y, robot))
            assert np.max(np.abs(sol.x.rotation - x.rotation)) < 1e-9
            assert np.max(np.abs(sol.x.translation - x.translation)) < 1e-9
            assert np.max(np.abs(sol.y.rotation - y.rotation)) < 1e-9
            assert np.max(np.abs(sol.y.translation - y.translation)) < 1e-9
            assert sol.residual < 1e-9

    def test_identity_fixed_point(self):
        # A_i = B_i means X = Y = I solves exactly with zero residual
        rng = np.random.default_rng(13)
        robot = [random_transform(rng) for _ in range(5)]
        pairs = [PosePair(robot_pose=a, camera_pose=invert(a)) for a in robot]
        sol = solve_hand_eye(pairs)
        assert np.max(np.abs(sol.x.rotation - np.eye(3))) < 1e-9
        assert np.max(np.abs(sol.x.translation)) < 1e-9
        assert np.max(np.abs(sol.y.rotation - np.eye(3))) < 1e-9
        assert sol.residual < 1e-9

    def test_pure_translations_rejected(self):
        rng = np.random.default_rng(14)
        x = random_transform(rng)
        y = random_transform(rng)
        robot = [RigidTransform(np.eye(3), rng.normal(size=3) * 300) for _ in range(6)]
        with pytest.raises(DegenerateMotions):
            solve_hand_eye(consistent_pairs(x, y, robot))

    def test_single_axis_rejected(self):
        rng = np.random.default_rng(15)
        x = random_transform(rng)
        y = random_transform(rng)
        axis = np.array([0.2, -0.7, 0.4])
        axis /= np.linalg.norm(axis)
        robot = [
            RigidTransform(rotation_from_rotvec(axis * a), rng.normal(size=3) * 300)
            for a in (0.3, 0.8, 1.3, 1.9)
        ]
        with pytest.raises(DegenerateMotions):
            solve_hand_eye(consistent_pairs(x, y, robot))

    def test_too_few_pairs(self):
        rng = np.random.default_rng(16)
        x, y = random_transform(rng), random_transform(rng)
        robot = [random_transform(rng) for _ in range(2)]
        with pytest.raises(TooFewPairs):
            solve_hand_eye(consistent_pairs(x, y, robot))

    def test_residual_grows_with_noise(self):
        rng = np.random.default_rng(17)
        sigmas = [0.0, 0.1, 0.5, 1.0]   # mm and degrees together
        means = []
        for sigma in sigmas:
            residuals = []
            for seed in range(20):
                local = np.random.default_rng(1000 + seed)
                x = random_transform(local, t_scale=100.0)
                y = random_transform(local, t_scale=500.0)
                robot = [random_transform(local, t_scale=400.0) for _ in range(10)]
                pairs = consistent_pairs(x, y, robot, noise_t=sigma, noise_r=sigma, rng=local)
                residuals.append(solve_hand_eye(pairs).residual)
            means.append(np.mean(residuals))
        assert all(a < b for a, b in zip(means, means[1:]))

    def test_base_frame_change_absorbed_by_y(self):
        rng = np.random.default_rng(18)
        x = random_transform(rng, t_scale=100.0)
        y = random_transform(rng, t_scale=500.0)
        robot = [random_transform(rng, t_scale=400.0) for _ in range(8)]
        pairs = consistent_pairs(x, y, robot)
        g = random_transform(rng, t_scale=1000.0)
        moved = [
            PosePair(robot_pose=compose(g, p.robot_pose), camera_pose=p.camera_pose)
            for p in pairs
        ]
        sol_a = solve_hand_eye(pairs)
        sol_b = solve_hand_eye(moved)
        assert np.max(np.abs(sol_a.x.rotation - sol_b.x.rotation)) < 1e-9
        assert np.max(np.abs(sol_a.x.translation - sol_b.x.translation)) < 1e-9
        # Y absorbs the base change
        expected_y = compose(g, sol_a.y)
        assert np.max(np.abs(sol_b.y.rotation - expected_y.rotation)) < 1e-9


def small_rig():
    cam0 = CameraView(
        CameraIntrinsics(368.1, 368.1, 320.0, 200.0, 640, 400),
        DistortionModel(k1=-0.1, k2=0.02),
    )
    cam1 = CameraView(
        CameraIntrinsics(368.1, 368.1, 320.0, 200.0, 640, 400),
        DistortionModel(),
        RigidTransform(np.eye(3), [-200.0, 0.0, 0.0]),
    )
    hand_eye = RigidTransform(rotation_from_rotvec([0.0, 0.05, 0.0]), [60.0, -40.0, 20.0])
    return Rig(cameras=[cam0, cam1], hand_eye=hand_eye)


class TestCalibrationFiles:
    def test_round_trip_bytes(self, tmp_path):
        rig = small_rig()
        p1 = tmp_path / "rig.json"
        p2 = tmp_path / "rig2.json"
        save_calibration(rig, p1)
        loaded = load_calibration(p1)
        save_calibration(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_baseline_in_default_file(self, tmp_path):
        rig = small_rig()
        path = tmp_path / "rig.json"
        save_calibration(rig, path)
        data = json.loads(path.read_text())
        assert data["cameras"][1]["extrinsic"]["t"] == [-200.0, 0.0, 0.0]

    def test_zero_focal_rejected(self):
        data = rig_to_dict(small_rig())
        data["cameras"][0]["fx"] = 0.0
        with pytest.raises(InvariantViolation):
            rig_from_dict(data)

    def test_empty_rig_refused(self):
        with pytest.raises(InvariantViolation):
            Rig(cameras=[])

    def test_slightly_drifted_rotation_reorthonormalized(self):
        data = rig_to_dict(small_rig())
        r = np.array(data["hand_eye"]["R"])
        data["hand_eye"]["R"] = (r + 1e-8 * np.ones((3, 3))).tolist()
        with pytest.warns(UserWarning, match="re-orthonormalized"):
            rig = rig_from_dict(data)
        err = np.linalg.norm(rig.hand_eye.rotation.T @ rig.hand_eye.rotation - np.eye(3))
        assert err < 1e-12

    def test_badly_drifted_rotation_rejected(self):
        data = rig_to_dict(small_rig())
        data["hand_eye"]["R"] = (np.eye(3) * 1.5).tolist()
        with pytest.raises(InvariantViolation):
            rig_from_dict(data)

    def test_missing_field_reports_path(self):
        data = rig_to_dict(small_rig())
        del data["cameras"][1]["fy"]
        with pytest.raises(SchemaError, match=r"cameras\[1\]"):
            rig_from_dict(data)

    def test_unsupported_version(self):
        data = rig_to_dict(small_rig())
        data["version"] = 99
        with pytest.raises(SchemaError, match="version"):
            rig_from_dict(data)

    def test_pose_pairs_round_trip(self):
        rng = np.random.default_rng(19)
        pairs = [
            PosePair(random_transform(rng), random_transform(rng)) for _ in range(4)
        ]
        data = pose_pairs_to_dict(pairs)
        back = pose_pairs_from_dict(data)
        for a, b in zip(pairs, back):
            assert a.robot_pose.almost_equal(b.robot_pose, tol=1e-12)
            assert a.camera_pose.almost_equal(b.camera_pose, tol=1e-12)
