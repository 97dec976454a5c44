"""Camera fly-throughs along the phantom centerline, with augmentations.

Four augmentations are applied, all driven by one seed: non-constant
inter-frame translation, time-reversed segments, per-sequence intrinsics
jitter and a per-sequence brightness attenuation factor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, Pose, look_rotation
from .phantom import Phantom


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectorySpec:
    n_frames: int = 16
    speed_min: float = 2.0
    speed_max: float = 2.0
    start_s: float = 10.0
    flip_segments: tuple = ()
    intrinsics_jitter_pct: float = 0.0
    attenuation_range: tuple = (1.0, 1.0)
    tilt_deg: float = 0.0
    lateral_offset: float = 0.0
    look_ahead: float = 6.0
    width: int = 128
    height: int = 128
    fov_deg: float = 90.0
    seed: int = 0
    max_retries: int = 20

    def __post_init__(self):
        if self.n_frames < 1:
            raise TrajectoryError("n_frames must be >= 1")
        if not 0 <= self.speed_min <= self.speed_max:
            raise TrajectoryError("need 0 <= speed_min <= speed_max")
        if not 0 <= self.intrinsics_jitter_pct < 1:
            raise TrajectoryError("intrinsics_jitter_pct must lie in [0, 1)")
        lo, hi = self.attenuation_range
        if not 0 <= lo <= hi <= 1:
            raise TrajectoryError("attenuation_range must satisfy 0 <= lo <= hi <= 1")
        flips = tuple(tuple(int(x) for x in f) for f in self.flip_segments)
        for a, b in flips:
            if not 0 <= a < b <= self.n_frames:
                raise TrajectoryError(f"flip segment ({a}, {b}) outside [0, {self.n_frames}]")
        object.__setattr__(self, "flip_segments", flips)
        object.__setattr__(self, "attenuation_range", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flip_segments"] = [list(f) for f in self.flip_segments]
        d["attenuation_range"] = list(self.attenuation_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectorySpec":
        d = dict(d)
        if "flip_segments" in d:
            d["flip_segments"] = tuple(tuple(f) for f in d["flip_segments"])
        if "attenuation_range" in d:
            d["attenuation_range"] = tuple(d["attenuation_range"])
        return cls(**d)


@dataclass
class Trajectory:
    poses: list
    intrinsics: list
    arclength: np.ndarray
    attenuation: float = 1.0
    jitter: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __len__(self):
        return len(self.poses)


def base_intrinsics(spec: TrajectorySpec) -> CameraIntrinsics:
    return CameraIntrinsics.from_fov(spec.width, spec.height, spec.fov_deg)


def sample_trajectory(spec: TrajectorySpec, phantom: Phantom) -> Trajectory:
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.max_retries):
        traj = _sample_once(spec, phantom, rng)
        if traj is not None:
            return traj
    raise TrajectoryError(f"no in-lumen trajectory after {spec.max_retries} attempts")


def _sample_once(spec: TrajectorySpec, phantom: Phantom, rng) -> Trajectory | None:
    f = spec.n_frames
    if spec.speed_max > spec.speed_min:
        steps = rng.uniform(spec.speed_min, spec.speed_max, size=f - 1)
    else:
        steps = np.full(f - 1, spec.speed_min)
    s = spec.start_s + np.concatenate([[0.0], np.cumsum(steps)])
    margin = 1e-9
    if s[0] < -margin or s[-1] > phantom.length + margin:
        return None

    r0 = phantom.spec.base_radius
    poses = []
    for sk in s:
        t, n, b = phantom.frame_at(sk)
        pos = phantom.point_at(sk)
        if spec.lateral_offset > 0:
            ang = rng.uniform(0, 2 * math.pi)
            rad = spec.lateral_offset * math.sqrt(rng.uniform())
            pos = pos + rad * (math.cos(ang) * n + math.sin(ang) * b)
        ahead = phantom.point_at(min(sk + spec.look_ahead, phantom.length))
        fwd = ahead - phantom.point_at(sk) if sk + spec.look_ahead <= phantom.length else t
        fwd = fwd / np.linalg.norm(fwd)
        if spec.tilt_deg > 0:
            fwd = _tilt(fwd, math.radians(spec.tilt_deg), rng)
        poses.append(Pose(look_rotation(fwd, n), pos))

    cams = np.array([p.translation for p in poses])
    if np.any(phantom.sdf(cams) >= -0.05 * r0):
        return None

    order = np.arange(f)
    for a, b in spec.flip_segments:
        order[a:b] = order[a:b][::-1]
    poses = [poses[i] for i in order]
    s = s[order]

    base = base_intrinsics(spec)
    p = spec.intrinsics_jitter_pct
    jit = rng.uniform(-p, p, size=4) if p > 0 else np.zeros(4)
    k = base.scaled(1 + jit[0], 1 + jit[1], 1 + jit[2], 1 + jit[3]) if p > 0 else base
    lo, hi = spec.attenuation_range
    att = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return Trajectory(poses, [k] * f, s, att, jit)


def _tilt(fwd: np.ndarray, max_angle: float, rng) -> np.ndarray:
    """Rotate ``fwd`` by a random angle <= max_angle about a random normal axis."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(fwd, helper)
    u /= np.linalg.norm(u)
    v = np.cross(fwd, u)
    phi = rng.uniform(0, 2 * math.pi)
    axis = math.cos(phi) * u + math.sin(phi) * v
    ang = rng.uniform(0, max_angle)
    out = fwd * math.cos(ang) + np.cross(axis, fwd) * math.sin(ang)
    return out / np.linalg.norm(out)
