import numpy as np
import pytest

from markerpose.detection import (
    BlobStats,
    DetectionParams,
    adaptive_threshold,
    connected_components,
    convex_hull_components,
    fill_holes,
    filter_blobs,
    morphological_close,
    relabel_components,
)

import oracles


class TestAdaptiveThreshold:
    def test_uniform_image_is_all_background(self):
        img = np.full((20, 20), 100, dtype=np.uint8)
        assert not adaptive_threshold(img, 0.25, 0.15).any()

    def test_three_by_three_center(self):
        img = np.full((3, 3), 10, dtype=np.uint8)
        img[1, 1] = 255
        out = adaptive_threshold(img, 1.0, 0.15)
        # window covers the whole image: mean = 335/9 = 37.2, only the
        # centre clears the white-pulled threshold
        assert out[1, 1]
        assert out.sum() == 1

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for _ in range(60):
            img = oracles.random_gray(rng, max_side=32)
            wf = float(rng.uniform(0.1, 1.0))
            s = float(rng.uniform(0.05, 0.5))
            got = adaptive_threshold(img, wf, s)
            want = oracles.window_mean_threshold(img, wf, s)
            assert np.array_equal(got, want)

    def test_sensitivity_bounds(self):
        img = np.zeros((4, 4), dtype=np.uint8)
        with pytest.raises(ValueError):
            adaptive_threshold(img, 0.5, 0.0)
        with pytest.raises(ValueError):
            adaptive_threshold(img, 0.5, 1.0)


class TestMorphologicalClose:
    def test_radius_zero_is_identity(self):
        rng = np.random.default_rng(0)
        b = oracles.random_binary(rng)
        assert np.array_equal(morphological_close(b, 0), b)

    def test_bridges_nearby_pixels(self):
        b = np.zeros((11, 11), dtype=bool)
        b[5, 3] = b[5, 6] = True
        closed = morphological_close(b, 2)
        labels = relabel_components(closed)
        assert labels.max() == 1
        assert closed[5, 3] and closed[5, 6]
        assert np.array_equal(closed, oracles.close_by_shifts(b, 2))

    def test_bridges_parallel_lines(self):
        b = np.zeros((13, 11), dtype=bool)
        b[3:10, 3] = b[3:10, 6] = True
        closed = morphological_close(b, 2)
        assert relabel_components(closed).max() == 1

    def test_idempotent(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            b = oracles.random_binary(rng, max_side=40)
            r = int(rng.integers(1, 4))
            once = morphological_close(b, r)
            twice = morphological_close(once, r)
            assert np.array_equal(once, twice)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(43)
        for _ in range(60):
            b = oracles.random_binary(rng, max_side=40)
            r = int(rng.integers(0, 5))
            got = morphological_close(b, r)
            want = oracles.close_by_shifts(b, r)
            assert np.array_equal(got, want)


class TestFillHoles:
    def test_ring_becomes_disc(self):
        b = np.zeros((15, 15), dtype=bool)
        yy, xx = np.mgrid[0:15, 0:15]
        r2 = (yy - 7) ** 2 + (xx - 7) ** 2
        ring = (r2 <= 36) & (r2 >= 16)
        filled = fill_holes(ring)
        assert np.array_equal(filled, r2 <= 36)

    def test_no_holes_unchanged(self):
        b = np.zeros((10, 10), dtype=bool)
        b[2:5, 2:5] = True
        assert np.array_equal(fill_holes(b), b)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(44)
        for _ in range(60):
            b = oracles.random_binary(rng, max_side=48)
            assert np.array_equal(fill_holes(b), oracles.fill_holes_flood(b))


class TestConnectedComponents:
    def test_empty_image(self):
        assert connected_components(np.zeros((8, 8), dtype=bool)) == []

    def test_diagonal_touch_is_one_component(self):
        b = np.zeros((4, 4), dtype=bool)
        b[1, 1] = b[2, 2] = True
        stats = connected_components(b)
        assert len(stats) == 1
        assert stats[0].area == 2.0

    def test_labels_match_flood_fill(self):
        rng = np.random.default_rng(45)
        for _ in range(60):
            b = oracles.random_binary(rng, max_side=64)
            assert np.array_equal(relabel_components(b), oracles.label_by_flood(b))

    def test_stats_against_pixel_sets(self):
        rng = np.random.default_rng(46)
        for _ in range(20):
            b = oracles.random_binary(rng, max_side=48)
            labels = oracles.label_by_flood(b)
            stats = connected_components(b)
            assert len(stats) == labels.max()
            for s in stats:
                ys, xs = np.nonzero(labels == s.label)
                assert s.area == float(len(xs))
                assert s.centroid == (float(xs.mean()), float(ys.mean()))
                assert s.bbox == (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
                assert 0.0 <= s.eccentricity < 1.0
                assert s.bbox[0] <= s.centroid[0] <= s.bbox[2]
                assert s.bbox[1] <= s.centroid[1] <= s.bbox[3]

    def test_eccentricity_degenerate_shapes(self):
        single = np.zeros((5, 5), dtype=bool)
        single[2, 2] = True
        assert connected_components(single)[0].eccentricity == 0.0
        line = np.zeros((3, 9), dtype=bool)
        line[1, 1:8] = True
        ecc = connected_components(line)[0].eccentricity
        assert 0.9 < ecc < 1.0


class TestConvexHull:
    def test_filled_disc_unchanged(self):
        yy, xx = np.mgrid[0:21, 0:21]
        disc = (yy - 10) ** 2 + (xx - 10) ** 2 <= 64
        assert np.array_equal(convex_hull_components(disc), disc)

    def test_l_shape_contains_input(self):
        b = np.zeros((12, 12), dtype=bool)
        b[2:10, 2:4] = True
        b[8:10, 2:10] = True
        hull = convex_hull_components(b)
        assert np.all(hull[b])
        assert hull.sum() > b.sum()
        # the diagonal midpoint of the L sits inside the hull
        assert hull[5, 5]

    def test_components_hulled_separately(self):
        b = np.zeros((10, 24), dtype=bool)
        b[1:4, 1:4] = True
        b[6:9, 20:23] = True
        b[1, 2] = b[2, 1] = True
        hull = convex_hull_components(b)
        # the gap between the two squares stays empty
        assert not hull[:, 8:16].any()
        assert relabel_components(hull).max() == 2

    def test_collinear_component(self):
        b = np.zeros((6, 6), dtype=bool)
        b[1, 1] = b[3, 3] = True   # diagonal pair, 8-connected? no: gap
        hull = convex_hull_components(b)
        assert hull[1, 1] and hull[3, 3]
        # (2,2) lies on the segment between the two separate components? they
        # are separate components, so no filling between them
        assert relabel_components(b).max() == 2

    def test_collinear_single_component_fills_segment(self):
        b = np.zeros((8, 8), dtype=bool)
        b[2, 2] = b[3, 3] = b[5, 5] = False
        b[2, 2] = True
        b[3, 3] = True
        b[4, 4] = True   # 8-connected diagonal line
        hull = convex_hull_components(b)
        assert hull[2, 2] and hull[3, 3] and hull[4, 4]
        assert hull.sum() == 3


class TestFilterBlobs:
    def _blob(self, label, area, ecc):
        return BlobStats(label=label, area=area, centroid=(1.0, 1.0),
                         eccentricity=ecc, bbox=(0, 0, 3, 3))

    def test_all_pass(self):
        params = DetectionParams()
        blobs = [self._blob(1, 100, 0.2), self._blob(2, 200, 0.5)]
        assert filter_blobs(blobs, params) == blobs

    def test_area_window(self):
        params = DetectionParams()
        blobs = [self._blob(1, 10, 0.2), self._blob(2, 100, 0.2), self._blob(3, 9000, 0.2)]
        kept = filter_blobs(blobs, params)
        assert [b.label for b in kept] == [2]

    def test_eccentricity_cut(self):
        params = DetectionParams()
        blobs = [self._blob(1, 100, 0.95), self._blob(2, 100, 0.9)]
        kept = filter_blobs(blobs, params)
        assert [b.label for b in kept] == [2]
