"""Pinhole camera model, rigid poses and the SE(3) exponential map.

Conventions used throughout the package:

* pixel coordinates are ``(u, v) = (column, row)`` with the origin at the
  centre of the top-left pixel;
* depth is z-depth (distance along the optical axis), in millimetres;
* a :class:`Pose` maps camera-frame points into the world frame;
* the camera looks down its +z axis, +x to the right, +y down the image;
* twists are ordered ``(rho, phi)``: translational part first, then the
  rotation vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid geometric input (non-finite values, broken invariants)."""


class BehindCameraError(GeometryError):
    """A point with z <= 0 was projected."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image size must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        """Square-pixel camera with horizontal field of view ``fov_deg``."""
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    def scaled(self, sx: float, sy: float, scx: float = 1.0, scy: float = 1.0) -> "CameraIntrinsics":
        cx = min(max(self.cx * scx, 0.0), self.width - 1e-6)
        cy = min(max(self.cy * scy, 0.0), self.height - 1e-6)
        return CameraIntrinsics(self.fx * sx, self.fy * sy, cx, cy, self.width, self.height)


@dataclass(frozen=True)
class PixelDepthObservation:
    u: float
    v: float
    depth: float

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (self.u, self.v, self.depth)):
            raise GeometryError("observation must be finite")
        if self.depth <= 0:
            raise GeometryError("observation depth must be positive")

    def in_bounds(self, k: CameraIntrinsics) -> bool:
        return 0 <= self.u < k.width and 0 <= self.v < k.height


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform taking camera-frame points to the world frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise GeometryError("pose must be finite")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation determinant is not +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
                and np.allclose(self.translation, other.translation, rtol=0, atol=atol))

    def to_dict(self) -> dict:
        return {"R": [float(x) for x in self.rotation.ravel()],
                "t": [float(x) for x in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["R"], dtype=float).reshape(3, 3), np.asarray(d["t"], dtype=float))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise GeometryError("non-finite input")


def backproject(obs: PixelDepthObservation, k: CameraIntrinsics) -> np.ndarray:
    """Lift a pixel with z-depth to a camera-frame point (mm)."""
    z = obs.depth
    return np.array([(obs.u - k.cx) * z / k.fx, (obs.v - k.cy) * z / k.fy, z])


def project(point, k: CameraIntrinsics) -> PixelDepthObservation:
    p = np.asarray(point, dtype=float)
    _check_finite(p)
    x, y, z = p
    if z <= 0:
        raise BehindCameraError(f"point has z = {z} <= 0")
    return PixelDepthObservation(k.fx * x / z + k.cx, k.fy * y / z + k.cy, float(z))


def backproject_array(u, v, depth, k: CameraIntrinsics) -> np.ndarray:
    """Vectorised :func:`backproject`; returns an ``(..., 3)`` array."""
    u, v, z = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float))
    return np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=-1)


def project_array(points, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`project` without the behind-camera check."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    return k.fx * p[..., 0] / z + k.cx, k.fy * p[..., 1] / z + k.cy, z


def pixel_grid(k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) coordinate arrays of shape (H, W)."""
    v, u = np.mgrid[0:k.height, 0:k.width]
    return u.astype(float), v.astype(float)


def ray_to_z_depth(ray_length, u, v, k: CameraIntrinsics) -> np.ndarray:
    """Convert distance-along-ray to z-depth for the given pixels."""
    x = (np.asarray(u, float) - k.cx) / k.fx
    y = (np.asarray(v, float) - k.cy) / k.fy
    return np.asarray(ray_length, float) / np.sqrt(1.0 + x * x + y * y)


def z_to_ray_depth(z, u, v, k: CameraIntrinsics) -> np.ndarray:
    x = (np.asarray(u, float) - k.cx) / k.fx
    y = (np.asarray(v, float) - k.cy) / k.fy
    return np.asarray(z, float) * np.sqrt(1.0 + x * x + y * y)


# -- rigid motion algebra ----------------------------------------------------

def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def transform(a: Pose, p) -> np.ndarray:
    """Apply ``a`` to a point or an ``(N, 3)`` array of points."""
    p = np.asarray(p, dtype=float)
    return p @ a.rotation.T + a.translation


def rotation_angle(r: np.ndarray) -> float:
    c = (np.trace(r) - 1.0) / 2.0
    s = np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    return float(math.atan2(s, c))


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation error in rad, translation error in mm) between two poses."""
    return rotation_angle(a.rotation.T @ b.rotation), float(np.linalg.norm(a.translation - b.translation))


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def look_rotation(forward, up_hint) -> np.ndarray:
    """Camera-to-world rotation whose optical axis (+z) points along ``forward``.

    ``up_hint`` fixes the roll; the image's -y direction is the component of
    ``up_hint`` orthogonal to ``forward``.
    """
    z = np.asarray(forward, float)
    z = z / np.linalg.norm(z)
    up = np.asarray(up_hint, float)
    y = -(up - np.dot(up, z) * z)
    n = np.linalg.norm(y)
    if n < 1e-9:
        raise GeometryError("up hint is parallel to the viewing direction")
    y /= n
    x = np.cross(y, z)
    return orthonormalize(np.column_stack([x, y, z]))


# -- SE(3) exponential / logarithm -----------------------------------------

def hat(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, float)
    theta = float(np.linalg.norm(phi))
    k = hat(phi)
    if theta < 1e-8:
        return orthonormalize(np.eye(3) + k + 0.5 * k @ k)
    return (np.eye(3) + math.sin(theta) / theta * k
            + (1.0 - math.cos(theta)) / theta ** 2 * k @ k)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation vector of ``r``.

    Angles within 1e-6 rad of pi recover the axis from the symmetric part,
    ``a a^T = (S - cos(theta) I) / (1 - cos(theta))`` with ``S = (R + R^T) / 2``.
    """
    r = np.asarray(r, float)
    theta = rotation_angle(r)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    if theta < 1e-8:
        return w
    if math.pi - theta > 1e-6:
        return theta / math.sin(theta) * w
    c = math.cos(theta)
    b = ((r + r.T) / 2.0 - c * np.eye(3)) / (1.0 - c)
    i = int(np.argmax(np.diag(b)))
    axis = b[:, i] / math.sqrt(max(b[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    if np.dot(axis, w) < 0:
        axis = -axis
    return theta * axis


def _left_jacobian(phi) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    k = hat(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    return (np.eye(3) + (1.0 - math.cos(theta)) / theta ** 2 * k
            + (theta - math.sin(theta)) / theta ** 3 * k @ k)


def _left_jacobian_inv(phi) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    k = hat(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * k + k @ k / 12.0
    half = theta / 2.0
    coef = (1.0 - half * math.cos(half) / math.sin(half)) / theta ** 2
    return np.eye(3) - 0.5 * k + coef * k @ k


def se3_exp(twist) -> Pose:
    xi = np.asarray(twist, float).reshape(6)
    _check_finite(xi)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), _left_jacobian(phi) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    phi = so3_log(pose.rotation)
    rho = _left_jacobian_inv(phi) @ pose.translation
    return np.concatenate([rho, phi])


# -- serialisation -----------------------------------------------------------

def load_intrinsics(path) -> CameraIntrinsics:
    with open(path) as fh:
        return CameraIntrinsics.from_dict(json.load(fh))


def save_intrinsics(k: CameraIntrinsics, path) -> None:
    with open(path, "w") as fh:
        json.dump(k.to_dict(), fh, indent=2)


def poses_to_json(poses: Iterable[Pose]) -> list[dict]:
    return [p.to_dict() for p in poses]


def poses_from_json(items: Sequence[dict]) -> list[Pose]:
    return [Pose.from_dict(d) for d in items]


def load_poses(path) -> list[Pose]:
    with open(path) as fh:
        return poses_from_json(json.load(fh))


def save_poses(poses: Iterable[Pose], path) -> None:
    with open(path, "w") as fh:
        json.dump(poses_to_json(poses), fh, indent=1)
