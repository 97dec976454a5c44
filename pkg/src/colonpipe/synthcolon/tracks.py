"""Ground-truth feature tracks from rendered frames (a stand-in for a learned tracker)."""

from __future__ import annotations

import numpy as np

from ..bundle_adjust import Track, TrackObservation, TrackSet
from ..geometry import backproject_array, inverse, project_array, transform


def _bilinear_depth(depth, mask, u, v):
    """Bilinear depth at subpixel (u, v); NaN unless all four taps are valid."""
    h, w = depth.shape
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    ok = (u0 >= 0) & (v0 >= 0) & (u0 < w - 1) & (v0 < h - 1)
    out = np.full(u.shape, np.nan)
    if not ok.any():
        return out
    a, b = u[ok] - u0[ok], v[ok] - v0[ok]
    uu, vv = u0[ok], v0[ok]
    taps = [(vv, uu), (vv, uu + 1), (vv + 1, uu), (vv + 1, uu + 1)]
    valid = np.all([mask[t] for t in taps], axis=0)
    d = ((1 - a) * (1 - b) * depth[taps[0]] + a * (1 - b) * depth[taps[1]]
         + (1 - a) * b * depth[taps[2]] + a * b * depth[taps[3]])
    out[np.flatnonzero(ok)] = np.where(valid, d, np.nan)
    return out


def oracle_tracks(frames, grid_stride: int = 16, window: int = 16, pixel_noise_sigma: float = 0.0,
                  seed: int = 0, origin_stride: int | None = None, depth_rel_tol: float = 0.01,
                  border: int = 2) -> TrackSet:
    """Track grid pixels through neighbouring frames using GT depth and poses.

    Grid pixels of every ``origin_stride``-th frame are lifted to world
    space and projected into each frame within ``window - 1`` frames of the
    origin.  An observation is kept when it lands inside the image and its
    projected depth agrees with the rendered depth there within
    ``depth_rel_tol`` (occlusion test).  Gaussian pixel noise is optional.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    rng = np.random.default_rng(seed)
    if origin_stride is None:
        origin_stride = max(1, window // 4)
    n = len(frames)
    tracks = []
    tid = 0
    for i in range(0, n, origin_stride):
        fi = frames[i]
        k = fi.intrinsics
        vv, uu = np.mgrid[border:k.height - border:grid_stride, border:k.width - border:grid_stride]
        uu, vv = uu.ravel().astype(float), vv.ravel().astype(float)
        sel = fi.mask[vv.astype(int), uu.astype(int)]
        uu, vv = uu[sel], vv[sel]
        dd = fi.depth[vv.astype(int), uu.astype(int)]
        world = transform(fi.pose, backproject_array(uu, vv, dd, k))
        per_track = [[TrackObservation(i, u, v, d)] for u, v, d in zip(uu, vv, dd)]
        for j in range(max(0, i - window + 1), min(n, i + window)):
            if j == i:
                continue
            fj = frames[j]
            kj = fj.intrinsics
            cam = transform(inverse(fj.pose), world)
            z = cam[:, 2]
            front = z > 1e-6
            u, v, _ = project_array(np.where(front[:, None], cam, 1.0), kj)
            inside = front & (u >= 0) & (v >= 0) & (u <= kj.width - 1) & (v <= kj.height - 1)
            rd = np.full(len(z), np.nan)
            rd[inside] = _bilinear_depth(fj.depth, fj.mask, u[inside], v[inside])
            with np.errstate(invalid="ignore"):
                keep = inside & (np.abs(rd - z) <= depth_rel_tol * z)
            for t in np.flatnonzero(keep):
                per_track[t].append(TrackObservation(j, float(u[t]), float(v[t]), float(z[t])))
        for obs in per_track:
            if len(obs) < 2:
                continue
            obs.sort(key=lambda o: o.frame)
            tracks.append(Track(tid, tuple(obs)))
            tid += 1

    if pixel_noise_sigma > 0:
        noisy = []
        for t in tracks:
            obs = []
            for o in t.observations:
                k = frames[o.frame].intrinsics
                du, dv = rng.normal(0.0, pixel_noise_sigma, size=2)
                u = float(np.clip(o.u + du, 0.0, k.width - 1e-6))
                v = float(np.clip(o.v + dv, 0.0, k.height - 1e-6))
                obs.append(TrackObservation(o.frame, u, v, o.depth))
            noisy.append(Track(t.track_id, tuple(obs)))
        tracks = noisy
    return TrackSet(tracks)
