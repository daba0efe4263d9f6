"""Marker detection: raw frame to ordered, model-matched marker centroids.

Stage order: undistort, adaptive threshold, morphological closing, hole
filling, per-component convex hull, connected components, geometric blob
filtering, then distance-profile identification against the target model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    AmbiguousAssignment,
    CountMismatch,
    DimensionMismatch,
    WrongBlobCount,
)
from .geometry import CameraView, distort_pixel
from .images import BinaryImage, GrayImage, as_gray
from .target import TargetModel

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)   # 4-connectivity
_BOX = np.ones((3, 3), dtype=int)                                  # 8-connectivity


@dataclass(frozen=True)
class DetectionParams:
    """Thresholding and blob-filtering knobs, all operator-tunable."""

    window_fraction: float = 0.125   # local-mean window as a fraction of image width
    sensitivity: float = 0.15        # how far above the local mean a pixel must sit
    closing_radius: int = 5          # disc radius, px
    min_area: float = 30.0           # px^2
    max_area: float = 5000.0         # px^2
    max_eccentricity: float = 0.9
    expected_count: int = 8

    def __post_init__(self):
        if not 0.0 < self.sensitivity < 1.0:
            raise ValueError(f"sensitivity must be in (0, 1), got {self.sensitivity}")
        if self.min_area >= self.max_area:
            raise ValueError("min_area must be below max_area")
        if self.closing_radius < 0:
            raise ValueError("closing_radius must be >= 0")

    def scaled(self, factor: float) -> "DetectionParams":
        """Params for a frame ``factor`` times the 640-px base width."""
        return DetectionParams(
            window_fraction=self.window_fraction,
            sensitivity=self.sensitivity,
            closing_radius=max(1, round(self.closing_radius * factor)),
            min_area=self.min_area * factor * factor,
            max_area=self.max_area * factor * factor,
            max_eccentricity=self.max_eccentricity,
            expected_count=self.expected_count,
        )

    def to_dict(self) -> dict:
        return {
            "window_fraction": self.window_fraction,
            "sensitivity": self.sensitivity,
            "closing_radius": self.closing_radius,
            "min_area": self.min_area,
            "max_area": self.max_area,
            "max_eccentricity": self.max_eccentricity,
            "expected_count": self.expected_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DetectionParams":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass(frozen=True)
class BlobStats:
    """Geometry of one connected component."""

    label: int
    area: float               # px^2 (pixel count)
    centroid: tuple[float, float]          # (x, y), sub-pixel
    eccentricity: float                    # in [0, 1)
    bbox: tuple[int, int, int, int]        # (x0, y0, x1, y1), inclusive


@dataclass(frozen=True)
class MarkerDetections:
    """Unordered surviving blob centroids plus pipeline diagnostics."""

    centroids: np.ndarray       # (N, 2) sub-pixel, undistorted image coords
    blobs_before: int           # component count before geometric filtering
    blobs_after: int
    stats: list[BlobStats] = field(default_factory=list)


@dataclass(frozen=True)
class DetectedMarkerSet:
    """Centroids ordered by model marker index."""

    centroids: np.ndarray       # (N, 2), row k corresponds to model_indices[k]
    model_indices: list[int]
    blobs_before: int = 0
    blobs_after: int = 0


# -- image operations ---------------------------------------------------------

def undistort_image(img: GrayImage, view: CameraView) -> GrayImage:
    """Resample the frame onto the ideal (distortion-free) pixel grid.

    Inverse mapping with bilinear interpolation; pixels that fall outside
    the source frame become 0.
    """
    img = as_gray(img)
    h, w = img.shape
    k = view.intrinsics
    if (w, h) != (k.width, k.height):
        raise DimensionMismatch(f"image is {w}x{h}, camera expects {k.width}x{k.height}")
    if view.distortion.is_zero:
        return img.copy()
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = distort_pixel(view, grid)
    sx = src[:, 0].reshape(h, w)
    sy = src[:, 1].reshape(h, w)
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    img_f = img.astype(float)
    out = (
        img_f[y0, x0] * (1 - fx) * (1 - fy)
        + img_f[y0, x1] * fx * (1 - fy)
        + img_f[y1, x0] * (1 - fx) * fy
        + img_f[y1, x1] * fx * fy
    )
    out[~valid] = 0.0
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def adaptive_threshold(img: GrayImage, window_fraction: float, sensitivity: float) -> BinaryImage:
    """Local-mean thresholding for bright features (integral-image based).

    A pixel is foreground iff it exceeds ``(1 - sensitivity) * window_mean
    + sensitivity * 255``, i.e. the local mean pulled toward white by the
    sensitivity fraction. The square window has side
    ``round(window_fraction * width)`` and is clamped at the borders, where
    the mean uses only in-image pixels.
    """
    img = as_gray(img)
    if not 0.0 < sensitivity < 1.0:
        raise ValueError(f"sensitivity must be in (0, 1), got {sensitivity}")
    h, w = img.shape
    side = max(1, round(window_fraction * w))
    lo = (side - 1) // 2
    hi = side // 2
    integral = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(img, axis=0, dtype=np.float64), axis=1, out=integral[1:, 1:])
    xs = np.arange(w)
    ys = np.arange(h)
    x0 = np.clip(xs - lo, 0, None)
    x1 = np.clip(xs + hi, None, w - 1)
    y0 = np.clip(ys - lo, 0, None)
    y1 = np.clip(ys + hi, None, h - 1)
    sums = (
        integral[np.ix_(y1 + 1, x1 + 1)]
        - integral[np.ix_(y0, x1 + 1)]
        - integral[np.ix_(y1 + 1, x0)]
        + integral[np.ix_(y0, x0)]
    )
    counts = (y1 - y0 + 1)[:, None] * (x1 - x0 + 1)[None, :]
    mean = sums / counts
    return img > (1.0 - sensitivity) * mean + sensitivity * 255.0


def _as_binary(b: np.ndarray) -> BinaryImage:
    arr = np.asarray(b)
    if arr.dtype != bool:
        arr = arr.astype(bool)
    return arr


def morphological_close(b: BinaryImage, radius: int) -> BinaryImage:
    """Dilation then erosion with a disc ``{dx^2 + dy^2 <= r^2 + r}``.

    The inclusion bound is the midpoint-circle rasterization of a radius-r
    disc. The structuring element is clipped at the image border (dilation
    sees nothing outside, erosion treats outside as foreground), which
    keeps the operation idempotent on the finite grid.
    """
    b = _as_binary(b)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0 or not b.any():
        return b.copy()
    radius = int(radius)
    # exact cutoff: EDT distances are sqrt of integers, and sqrt is monotone
    cutoff = float(np.sqrt(radius * radius + radius))
    # closing only changes pixels within `radius` of the foreground, so
    # restrict the distance transforms to a padded bounding box
    ys, xs = np.nonzero(b)
    h, w = b.shape
    pad = 2 * radius + 3
    y0, y1 = max(0, ys.min() - pad), min(h, ys.max() + pad + 1)
    x0, x1 = max(0, xs.min() - pad), min(w, xs.max() + pad + 1)
    sub = b[y0:y1, x0:x1]
    dist_to_fg = ndimage.distance_transform_edt(~sub)
    dilated = dist_to_fg <= cutoff
    if dilated.all():
        eroded = dilated
    else:
        dist_to_bg = ndimage.distance_transform_edt(dilated)
        eroded = dist_to_bg > cutoff
    out = np.zeros_like(b)
    out[y0:y1, x0:x1] = eroded
    return out


def fill_holes(b: BinaryImage) -> BinaryImage:
    """Turn background regions not 4-connected to the border into foreground."""
    b = _as_binary(b)
    background = ~b
    labels, count = ndimage.label(background, structure=_CROSS)
    if count == 0:
        return b.copy()
    border = np.unique(np.concatenate([
        labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]
    ]))
    border = border[border != 0]
    holes = background & ~np.isin(labels, border)
    return b | holes


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull of integer points, counter-clockwise, degenerate-safe."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(seq):
        out: list[np.ndarray] = []
        for p in seq:
            while len(out) >= 2:
                a, bb = out[-1] - out[-2], p - out[-2]
                if a[0] * bb[1] - a[1] * bb[0] <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:   # collinear input collapses to a segment
        return np.array([pts[0], pts[-1]])
    return hull


def convex_hull_components(b: BinaryImage) -> BinaryImage:
    """Replace every 8-connected component by its filled convex hull."""
    b = _as_binary(b)
    labels, count = ndimage.label(b, structure=_BOX)
    out = np.zeros_like(b)
    h, w = b.shape
    for sl, lab in zip(ndimage.find_objects(labels), range(1, count + 1)):
        ys, xs = np.nonzero(labels[sl] == lab)
        ys = ys + sl[0].start
        xs = xs + sl[1].start
        pts = np.stack([xs, ys], axis=1).astype(np.int64)
        hull = _convex_hull(pts)
        if len(hull) <= 2:
            _fill_segment(out, hull)
            continue
        x0, x1 = hull[:, 0].min(), hull[:, 0].max()
        y0, y1 = hull[:, 1].min(), hull[:, 1].max()
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        inside = np.ones(gx.shape, dtype=bool)
        for i in range(len(hull)):
            ax, ay = hull[i]
            bx, by = hull[(i + 1) % len(hull)]
            # integer cross product keeps the inclusive test exact
            inside &= (bx - ax) * (gy - ay) - (by - ay) * (gx - ax) >= 0
        out[y0:y1 + 1, x0:x1 + 1] |= inside
    return out


def _fill_segment(out: np.ndarray, hull: np.ndarray) -> None:
    """Rasterize a degenerate (point or segment) hull: lattice points on it."""
    if len(hull) == 1:
        out[hull[0, 1], hull[0, 0]] = True
        return
    (ax, ay), (bx, by) = hull
    x0, x1 = min(ax, bx), max(ax, bx)
    y0, y1 = min(ay, by), max(ay, by)
    gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    on_line = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax) == 0
    out[y0:y1 + 1, x0:x1 + 1] |= on_line


def connected_components(b: BinaryImage) -> list[BlobStats]:
    """8-connected labelling with per-blob area, centroid, and eccentricity.

    Labels are assigned in raster order of each component's first pixel.
    Eccentricity comes from the second-order central moments with the 1/12
    pixel-extent correction, so single pixels score 0 and thin lines stay
    strictly below 1.
    """
    b = _as_binary(b)
    labels, count = ndimage.label(b, structure=_BOX)
    if count == 0:
        return []
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    _, first_pos = np.unique(flat[nz], return_index=True)
    order = np.argsort(nz[first_pos], kind="stable")      # original label k at rank order^-1
    rank_of_label = np.empty(count, dtype=int)
    rank_of_label[order] = np.arange(count)
    slices = ndimage.find_objects(labels)
    entries: list[tuple[int, BlobStats]] = []
    for lab0, sl in enumerate(slices):
        lab = lab0 + 1
        ys, xs = np.nonzero(labels[sl] == lab)
        ys = ys + sl[0].start
        xs = xs + sl[1].start
        area = float(len(xs))
        cx = float(xs.mean())
        cy = float(ys.mean())
        dx = xs - cx
        dy = ys - cy
        # covariance of pixel centres plus the unit-square spread of a pixel
        mxx = float(np.mean(dx * dx)) + 1.0 / 12.0
        myy = float(np.mean(dy * dy)) + 1.0 / 12.0
        mxy = float(np.mean(dx * dy))
        common = 0.5 * (mxx + myy)
        d = float(np.hypot(0.5 * (mxx - myy), mxy))
        lam1 = common + d
        lam2 = max(common - d, 0.0)
        ecc = float(np.sqrt(max(0.0, 1.0 - lam2 / lam1))) if lam1 > 0 else 0.0
        blob = BlobStats(
            label=int(rank_of_label[lab0]) + 1,
            area=area,
            centroid=(cx, cy),
            eccentricity=ecc,
            bbox=(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())),
        )
        entries.append((blob.label, blob))
    entries.sort(key=lambda e: e[0])
    return [blob for _, blob in entries]


def relabel_components(b: BinaryImage) -> np.ndarray:
    """8-connected label image with raster-order-canonical label numbering."""
    b = _as_binary(b)
    labels, count = ndimage.label(b, structure=_BOX)
    if count == 0:
        return labels
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    _, first_pos = np.unique(flat[nz], return_index=True)
    order = np.argsort(nz[first_pos], kind="stable")
    remap = np.zeros(count + 1, dtype=labels.dtype)
    remap[1 + order] = np.arange(1, count + 1)
    return remap[labels]


def filter_blobs(stats: list[BlobStats], params: DetectionParams) -> list[BlobStats]:
    """Keep blobs inside the area window and below the eccentricity cap."""
    return [
        s for s in stats
        if params.min_area <= s.area <= params.max_area
        and s.eccentricity <= params.max_eccentricity
    ]


def detect_markers(img: GrayImage, view: CameraView, params: DetectionParams) -> MarkerDetections:
    """Run the full segmentation chain and return surviving centroids.

    Raises :class:`WrongBlobCount` when the survivor count differs from
    ``params.expected_count`` - the signal to hand thresholding/filtering
    parameters back to the operator.
    """
    und = undistort_image(img, view)
    binary = adaptive_threshold(und, params.window_fraction, params.sensitivity)
    closed = morphological_close(binary, params.closing_radius)
    filled = fill_holes(closed)
    hulls = convex_hull_components(filled)
    stats = connected_components(hulls)
    kept = filter_blobs(stats, params)
    if len(kept) != params.expected_count:
        raise WrongBlobCount(len(kept), params.expected_count)
    centroids = np.array([s.centroid for s in kept], dtype=float)
    return MarkerDetections(
        centroids=centroids,
        blobs_before=len(stats),
        blobs_after=len(kept),
        stats=kept,
    )


# -- identification -----------------------------------------------------------

def _angular_order(points: np.ndarray) -> np.ndarray:
    center = points.mean(axis=0)
    angles = np.arctan2(points[:, 1] - center[1], points[:, 0] - center[0])
    return np.argsort(angles, kind="stable")


def _normalized_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    iu = np.triu_indices(len(points), k=1)
    scale = d[iu].mean()
    return d / scale


def identify_markers(
    centroids: np.ndarray,
    model: TargetModel,
    blobs_before: int = 0,
    blobs_after: int = 0,
) -> DetectedMarkerSet:
    """Match centroids one-to-one to model markers by distance profile.

    Both point sets are put in angular order around their centroid; all
    cyclic shifts and both orientations are scored by the squared
    discrepancy of their normalized pairwise distances. Valid for the
    small-rotation regime (< 10 degrees) the pipeline is designed for.

    Raises :class:`CountMismatch` on a wrong centroid count and
    :class:`AmbiguousAssignment` when the runner-up scores within 1%.
    """
    pts = np.asarray(centroids, dtype=float).reshape(-1, 2)
    n = model.marker_count
    if len(pts) != n:
        raise CountMismatch(f"{len(pts)} centroids for {n} model markers")
    model_order = _angular_order(model.plane_points())
    image_order = _angular_order(pts)
    d_model = _normalized_distances(model.plane_points()[model_order])
    d_image = _normalized_distances(pts[image_order])
    iu = np.triu_indices(n, k=1)

    best: tuple[float, np.ndarray] | None = None
    second = np.inf
    for direction in (1, -1):
        for shift in range(n):
            idx = (shift + direction * np.arange(n)) % n
            diff = d_image[np.ix_(idx, idx)] - d_model
            score = float(np.sum(diff[iu] ** 2))
            if best is None or score < best[0]:
                if best is not None:
                    second = best[0]
                best = (score, idx)
            elif score < second:
                second = score
    assert best is not None
    score, idx = best
    if second <= 1.01 * score:
        raise AmbiguousAssignment(
            f"best orderings score {score:.3e} and {second:.3e} (within 1%)"
        )
    ordered = np.empty_like(pts)
    ordered[model_order] = pts[image_order][idx]
    return DetectedMarkerSet(
        centroids=ordered,
        model_indices=list(range(n)),
        blobs_before=blobs_before,
        blobs_after=blobs_after,
    )
