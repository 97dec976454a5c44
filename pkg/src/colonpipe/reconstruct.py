"""Fusing posed depth frames into a labelled, coloured world-frame point cloud."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, backproject_array, transform
from .io import read_ply, write_ply

log = logging.getLogger(__name__)

MUCOSA = 0
POLYP = 1
CLASSES = (MUCOSA, POLYP)


@dataclass(eq=False)
class PointCloud:
    xyz: np.ndarray
    rgb: np.ndarray | None = None
    label: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")
        n = len(self.xyz)
        if self.rgb is not None:
            self.rgb = np.asarray(self.rgb, dtype=np.uint8).reshape(-1, 3)
            if len(self.rgb) != n:
                raise ValueError("rgb length mismatch")
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.uint8).reshape(-1)
            if len(self.label) != n:
                raise ValueError("label length mismatch")
            if not np.isin(self.label, CLASSES).all():
                raise ValueError(f"labels must lie in {CLASSES}")

    def __len__(self):
        return len(self.xyz)

    def save(self, path, binary: bool = True) -> None:
        write_ply(path, self.xyz, self.rgb, self.label, binary=binary)

    @classmethod
    def load(cls, path) -> "PointCloud":
        d = read_ply(path)
        return cls(d["xyz"], d["rgb"], d["label"])


def _as_rgb(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    return a


def fuse(depths, poses, intrinsics, colors=None, labels=None, stride: int = 1) -> PointCloud:
    """Backproject every valid (strided) pixel and move it into the world frame.

    ``depths`` is a :class:`~colonpipe.depth_eval.DepthSequence` or a list of
    ``(depth, mask)`` pairs; ``intrinsics`` one camera or one per frame.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if hasattr(depths, "values") and hasattr(depths, "mask"):
        frames = list(zip(depths.values, depths.mask))
    else:
        frames = [(np.asarray(d, float), np.asarray(m, bool)) for d, m in depths]
    n = len(frames)
    if len(poses) != n:
        raise ValueError(f"{n} depth frames but {len(poses)} poses")
    if isinstance(intrinsics, CameraIntrinsics):
        intrinsics = [intrinsics] * n
    if len(intrinsics) != n:
        raise ValueError("intrinsics count mismatch")
    if colors is not None and len(colors) != n:
        raise ValueError("color frame count mismatch")
    if labels is not None and len(labels) != n:
        raise ValueError("label frame count mismatch")
    xyz, rgb, lab = [], [], []
    for f, (depth, mask) in enumerate(frames):
        k = intrinsics[f]
        sub = np.zeros_like(mask)
        sub[::stride, ::stride] = True
        valid = mask & sub & np.isfinite(depth) & (depth > 0)
        if not valid.any():
            log.warning("frame %d has no valid pixels", f)
            continue
        v, u = np.nonzero(valid)
        pts = backproject_array(u.astype(float), v.astype(float), depth[v, u], k)
        xyz.append(transform(poses[f], pts))
        if colors is not None:
            rgb.append(_as_rgb(colors[f])[v, u])
        if labels is not None:
            lab.append(np.asarray(labels[f])[v, u].astype(np.uint8))
    if not xyz:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3), np.uint8) if colors is not None else None,
                          np.zeros(0, np.uint8) if labels is not None else None)
    return PointCloud(np.concatenate(xyz),
                      np.concatenate(rgb) if colors is not None else None,
                      np.concatenate(lab) if labels is not None else None)


def voxel_downsample(cloud: PointCloud, voxel_mm: float) -> PointCloud:
    """One point per occupied voxel: centroid, mean colour, majority label.

    Label ties go to the polyp class.  Output is sorted by voxel index.
    """
    if not voxel_mm > 0:
        raise ValueError("voxel_mm must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.xyz / voxel_mm).astype(np.int64)
    uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    m = len(uniq)
    xyz = np.zeros((m, 3))
    np.add.at(xyz, inv, cloud.xyz)
    xyz /= counts[:, None]
    rgb = None
    if cloud.rgb is not None:
        acc = np.zeros((m, 3))
        np.add.at(acc, inv, cloud.rgb.astype(float))
        rgb = np.round(acc / counts[:, None]).astype(np.uint8)
    label = None
    if cloud.label is not None:
        polyp = np.bincount(inv, weights=(cloud.label == POLYP).astype(float), minlength=m)
        label = np.where(2 * polyp >= counts, POLYP, MUCOSA).astype(np.uint8)
    return PointCloud(xyz, rgb, label)


def polyp_colors(cloud: PointCloud, base=(200, 200, 200), lesion=(0, 0, 255)) -> np.ndarray:
    """Per-point display colours with lesion points painted blue."""
    out = np.tile(np.asarray(base, np.uint8), (len(cloud), 1)) if cloud.rgb is None else cloud.rgb.copy()
    if cloud.label is not None:
        out[cloud.label == POLYP] = lesion
    return out
