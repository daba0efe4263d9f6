import numpy as np
import pytest

from markerpose.detection import (
    DetectionParams,
    detect_markers,
    identify_markers,
    undistort_image,
)
from markerpose.errors import (
    AmbiguousAssignment,
    CountMismatch,
    DimensionMismatch,
    WrongBlobCount,
)
from markerpose.geometry import (
    CameraIntrinsics,
    CameraView,
    DistortionModel,
    RigidTransform,
    compose,
    project,
    rotation_from_rotvec,
)
from markerpose.images import parse_pgm, pgm_bytes, read_pgm, write_pgm
from markerpose.simulator import (
    PoseLimits,
    SceneConfig,
    make_default_rig,
    render_view,
    sample_test_pose,
)
from markerpose.target import TargetModel, default_target_model

MODEL = default_target_model()
MILD_DIST = DistortionModel(k1=-0.15, k2=0.03, p1=4e-4, p2=-3e-4)


def plain_view(dist=DistortionModel()):
    return CameraView(CameraIntrinsics(368.1, 368.1, 320.0, 200.0, 640, 400), dist)


class TestUndistortImage:
    def test_zero_distortion_is_exact_passthrough(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(400, 640), dtype=np.uint8)
        out = undistort_image(img, plain_view())
        assert np.array_equal(out, img)

    def test_constant_image_stays_constant_in_interior(self):
        img = np.full((400, 640), 87, dtype=np.uint8)
        out = undistort_image(img, plain_view(MILD_DIST))
        # barrel distortion pulls in black border pixels at the edges only
        assert np.all(out[80:-80, 80:-80] == 87)

    def test_dimension_mismatch(self):
        img = np.zeros((100, 100), dtype=np.uint8)
        with pytest.raises(DimensionMismatch):
            undistort_image(img, plain_view())

    def test_distorted_render_undistorts_to_ideal_geometry(self):
        # dot-grid round trip: render through distortion, undistort the
        # image, detected centroids must match the zero-distortion oracle
        view_d = plain_view(MILD_DIST)
        scene = SceneConfig()
        pose = RigidTransform(np.eye(3), [0.0, 10.0, 380.0])
        img = render_view(scene, pose, view_d, seed=0)
        det = detect_markers(img, view_d, DetectionParams())
        matched = identify_markers(det.centroids, MODEL)
        ideal = project(plain_view(), pose.apply(MODEL.marker_positions))
        err = np.hypot(*(matched.centroids - ideal).T)
        assert err.max() < 0.2


class TestDetectMarkers:
    def test_all_black_frame(self):
        img = np.zeros((400, 640), dtype=np.uint8)
        with pytest.raises(WrongBlobCount) as exc:
            detect_markers(img, plain_view(), DetectionParams())
        assert exc.value.found == 0
        assert exc.value.expected == 8

    def test_centroid_invariant_across_pose_sweep(self):
        rig = make_default_rig()
        scene = SceneConfig()
        params = DetectionParams()
        limits = PoseLimits()
        rng = np.random.default_rng(7)
        for i in range(12):
            pose = sample_test_pose(limits, rng, rig.cameras, MODEL)
            for ci, view in enumerate(rig.cameras):
                cam_pose = compose(view.camera_from_reference, pose)
                img = render_view(scene, cam_pose, view, seed=100 * i + ci)
                det = detect_markers(img, view, params)
                matched = identify_markers(det.centroids, MODEL)
                truth = project(view, cam_pose.apply(MODEL.marker_positions))
                err = np.hypot(*(matched.centroids - truth).T)
                assert err.max() < 0.3

    def test_deterministic(self):
        scene = SceneConfig(noise_sigma=2.0)
        pose = RigidTransform(np.eye(3), [0.0, 0.0, 400.0])
        view = plain_view()
        img = render_view(scene, pose, view, seed=9)
        a = detect_markers(img, view, DetectionParams())
        b = detect_markers(img, view, DetectionParams())
        assert np.array_equal(a.centroids, b.centroids)


class TestIdentifyMarkers:
    def _projected(self, pose=None, view=None):
        view = view or plain_view()
        pose = pose or RigidTransform(np.eye(3), [0.0, 0.0, 400.0])
        return project(view, pose.apply(MODEL.marker_positions))

    def test_recovers_shuffled_order(self):
        pix = self._projected()
        rng = np.random.default_rng(3)
        perm = rng.permutation(8)
        matched = identify_markers(pix[perm], MODEL)
        assert np.allclose(matched.centroids, pix)
        assert sorted(matched.model_indices) == list(range(8))

    def test_in_plane_rotation_within_limit(self):
        pose = RigidTransform(
            rotation_from_rotvec([0.0, 0.0, np.radians(10.0)]), [0.0, 0.0, 400.0]
        )
        pix = self._projected(pose)
        rng = np.random.default_rng(4)
        matched = identify_markers(pix[rng.permutation(8)], MODEL)
        assert np.allclose(matched.centroids, pix)

    def test_count_mismatch(self):
        pix = self._projected()
        with pytest.raises(CountMismatch):
            identify_markers(pix[:7], MODEL)

    def test_symmetric_layout_is_ambiguous(self):
        square = TargetModel(
            np.array([
                [-40.0, -40.0, 0.0], [40.0, -40.0, 0.0],
                [40.0, 40.0, 0.0], [-40.0, 40.0, 0.0],
            ]),
            14.0, 1.5, MODEL.bead_offsets,
        )
        pose = RigidTransform(np.eye(3), [0.0, 0.0, 400.0])
        pix = project(plain_view(), pose.apply(square.marker_positions))
        with pytest.raises(AmbiguousAssignment):
            identify_markers(pix, square)

    def test_permutation_invariant_no_duplicates(self):
        rig = make_default_rig()
        limits = PoseLimits()
        rng = np.random.default_rng(5)
        for _ in range(20):
            pose = sample_test_pose(limits, rng, rig.cameras, MODEL)
            pix = project(rig.cameras[0], pose.apply(MODEL.marker_positions))
            matched = identify_markers(pix[rng.permutation(8)], MODEL)
            assert len(set(matched.model_indices)) == 8


class TestPgm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        img = rng.integers(0, 256, size=(37, 53), dtype=np.uint8)
        path = tmp_path / "frame.pgm"
        write_pgm(path, img)
        back = read_pgm(path)
        assert np.array_equal(back, img)

    def test_bytes_round_trip_with_comment(self):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        data = pgm_bytes(img)
        hacked = data.replace(b"P5\n", b"P5\n# a comment\n")
        assert np.array_equal(parse_pgm(hacked), img)
