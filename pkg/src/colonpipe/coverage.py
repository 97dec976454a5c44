"""Surface coverage: PCA centerline, cylindrical unrolling, morphology, ratio.

The map's rows index arclength ``s`` along the principal axis and its
columns the circumferential angle ``theta``.  The angle is measured in the
frame ``e1 = axis x up`` (``up = +z``, falling back to ``+x`` when the axis
is parallel to it) and ``e2 = axis x e1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

UP = np.array([0.0, 0.0, 1.0])


class CoverageError(ValueError):
    pass


@dataclass(eq=False)
class CoverageMap:
    grid: np.ndarray
    s_range: tuple
    axis: np.ndarray
    origin: np.ndarray
    ref: np.ndarray | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.ndim != 2 or min(self.grid.shape) < 1:
            raise CoverageError("grid must be a non-empty 2D array")
        if not self.s_range[0] < self.s_range[1]:
            raise CoverageError("s_range must be increasing")
        self.axis = np.asarray(self.axis, float)
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise CoverageError("axis must be unit length")
        self.origin = np.asarray(self.origin, float)

    @property
    def n_s(self) -> int:
        return self.grid.shape[0]

    @property
    def n_theta(self) -> int:
        return self.grid.shape[1]

    def with_grid(self, grid) -> "CoverageMap":
        return CoverageMap(grid, self.s_range, self.axis, self.origin, self.ref)

    def summary(self) -> dict:
        return {"coverage_ratio": coverage_ratio(self), "n_s": self.n_s, "n_theta": self.n_theta,
                "s_min": float(self.s_range[0]), "s_max": float(self.s_range[1])}


@dataclass(frozen=True)
class Centerline:
    axis: np.ndarray
    origin: np.ndarray
    ambiguous: bool = False
    eigenvalues: tuple = ()


def pca_centerline(points, direction_hint=None) -> Centerline:
    """Centroid and first principal direction of a point set.

    The sign is chosen so the axis has non-negative dot product with
    ``direction_hint`` (e.g. last minus first camera position), else +x.
    """
    xyz = np.asarray(getattr(points, "xyz", points), float).reshape(-1, 3)
    if len(xyz) < 3:
        raise CoverageError("need at least 3 points")
    origin = xyz.mean(axis=0)
    cov = np.cov((xyz - origin).T, bias=True)
    w, v = np.linalg.eigh(cov)
    if w[1] <= 1e-12 * max(w[2], 1e-300):
        raise CoverageError("points are collinear or coincident")
    axis = v[:, 2]
    ambiguous = bool(w[2] - w[1] <= 1e-6 * max(w[2], 1.0))
    if ambiguous:
        log.warning("leading eigenvalues are equal; principal axis is ambiguous")
    hint = np.array([1.0, 0.0, 0.0]) if direction_hint is None else np.asarray(direction_hint, float)
    d = float(axis @ hint)
    if abs(d) < 1e-12:
        # hint is perpendicular: make the dominant component positive
        d = float(axis[np.argmax(np.abs(axis))])
    if d < 0:
        axis = -axis
    return Centerline(axis / np.linalg.norm(axis), origin, ambiguous, tuple(float(x) for x in w[::-1]))


def perpendicular_frame(axis, ref=None) -> tuple[np.ndarray, np.ndarray]:
    axis = np.asarray(axis, float)
    if ref is None:
        e1 = np.cross(axis, UP)
        if np.linalg.norm(e1) < 1e-6:
            e1 = np.cross(axis, np.array([1.0, 0.0, 0.0]))
    else:
        ref = np.asarray(ref, float)
        e1 = ref - (ref @ axis) * axis
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def cylindrical_coords(points, axis, origin, ref=None) -> tuple[np.ndarray, np.ndarray]:
    """(s, theta in [0, 2 pi)) of each point about the given axis."""
    xyz = np.asarray(getattr(points, "xyz", points), float).reshape(-1, 3)
    axis = np.asarray(axis, float)
    rel = xyz - np.asarray(origin, float)
    s = rel @ axis
    e1, e2 = perpendicular_frame(axis, ref)
    theta = np.mod(np.arctan2(rel @ e2, rel @ e1), 2 * math.pi)
    return s, theta


def unroll(points, axis, origin, bins=(256, 64), ref=None, s_range=None,
           percentiles=(1.0, 99.0)) -> CoverageMap:
    """Mark every (s, theta) cell that contains at least one point.

    ``s_range`` defaults to the given percentiles of the points' ``s``.
    Points outside it are ignored.
    """
    n_s, n_t = int(bins[0]), int(bins[1])
    if n_s < 1 or n_t < 1:
        raise CoverageError("bins must be >= (1, 1)")
    xyz = np.asarray(getattr(points, "xyz", points), float).reshape(-1, 3)
    if len(xyz) == 0:
        raise CoverageError("empty cloud")
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    s, theta = cylindrical_coords(xyz, axis, origin, ref)
    if s_range is None:
        lo, hi = np.percentile(s, percentiles)
        if not hi > lo:
            lo, hi = float(s.min()) - 0.5, float(s.max()) + 0.5
        s_range = (float(lo), float(hi))
    lo, hi = s_range
    keep = (s >= lo) & (s <= hi)
    i = np.minimum(((s[keep] - lo) / (hi - lo) * n_s).astype(int), n_s - 1)
    j = np.minimum((theta[keep] / (2 * math.pi) * n_t).astype(int), n_t - 1)
    grid = np.zeros((n_s, n_t), bool)
    grid[i, j] = True
    return CoverageMap(grid, (float(lo), float(hi)), axis, np.asarray(origin, float), ref)


def _square(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), bool)


def erode(grid: np.ndarray, radius: int) -> np.ndarray:
    """Square erosion; wraps along theta (axis 1) and replicates edges along s."""
    if radius == 0:
        return grid.copy()
    return ndimage.minimum_filter(grid.astype(np.uint8), footprint=_square(radius),
                                  mode=("nearest", "wrap")).astype(bool)


def dilate(grid: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return grid.copy()
    return ndimage.maximum_filter(grid.astype(np.uint8), footprint=_square(radius),
                                  mode=("nearest", "wrap")).astype(bool)


def opening(grid, radius):
    return dilate(erode(grid, radius), radius)


def closing(grid, radius):
    return erode(dilate(grid, radius), radius)


def morph_clean(cmap: CoverageMap, open_radius: int = 1, close_radius: int = 2) -> CoverageMap:
    """Opening (removes specks) followed by closing (fills pinholes)."""
    if open_radius < 0 or close_radius < 0:
        raise CoverageError("radii must be >= 0")
    g = opening(cmap.grid, open_radius)
    g = closing(g, close_radius)
    return cmap.with_grid(g)


def coverage_ratio(cmap: CoverageMap) -> float:
    return float(np.count_nonzero(cmap.grid)) / cmap.grid.size


def assess(points, bins=(256, 64), open_radius: int = 1, close_radius: int = 2,
           direction_hint=None) -> tuple[CoverageMap, CoverageMap, Centerline]:
    """Centerline, raw map and cleaned map for a point cloud."""
    cl = pca_centerline(points, direction_hint)
    raw = unroll(points, cl.axis, cl.origin, bins)
    return raw, morph_clean(raw, open_radius, close_radius), cl


def to_image(cmap: CoverageMap) -> np.ndarray:
    """8-bit image (255 = seen) with s horizontal and theta vertical."""
    return (cmap.grid.T.astype(np.uint8) * 255)
