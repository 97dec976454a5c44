"""Windowed pose estimation from depth-augmented feature tracks.

For every ordered frame pair (i, j) co-observing a track, a tracked pixel
with depth in frame i is lifted to 3D, moved into camera j and projected::

    r_ij = pi_j(W_j^-1 W_i pi_i^-1([p_i, d_i])) - [p_j, d_j]

The depth component is multiplied by ``depth_weight`` (px/mm).  Poses are
camera-to-world, ``W_0`` is pinned to identity, and the remaining poses
are refined with Levenberg-Marquardt on right-multiplied twists.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import CameraIntrinsics, Pose, compose, inverse, orthonormalize, se3_exp
from .io import read_tracks_jsonl

log = logging.getLogger(__name__)

BEHIND_Z = 1e-3
RESIDUAL_CAP = 1e3


class TrackError(ValueError):
    pass


@dataclass(frozen=True)
class TrackObservation:
    frame: int
    u: float
    v: float
    depth: float


@dataclass(frozen=True)
class Track:
    track_id: int
    observations: tuple

    def __len__(self):
        return len(self.observations)


@dataclass
class TrackSet:
    tracks: list = field(default_factory=list)

    def __len__(self):
        return len(self.tracks)

    def __iter__(self):
        return iter(self.tracks)

    @property
    def n_observations(self) -> int:
        return sum(len(t) for t in self.tracks)

    @property
    def max_frame(self) -> int:
        return max((o.frame for t in self.tracks for o in t.observations), default=-1)

    def validate(self, n_frames: int, intrinsics=None) -> None:
        for t in self.tracks:
            frames = [o.frame for o in t.observations]
            if len(frames) < 2 or len(set(frames)) != len(frames):
                raise TrackError(f"track {t.track_id}: needs >= 2 observations in distinct frames")
            for o in t.observations:
                if not 0 <= o.frame < n_frames:
                    raise TrackError(f"track {t.track_id}: frame {o.frame} outside [0, {n_frames})")
                if not (math.isfinite(o.u) and math.isfinite(o.v) and math.isfinite(o.depth)):
                    raise TrackError(f"track {t.track_id}: non-finite observation")
                if o.depth <= 0:
                    raise TrackError(f"track {t.track_id}: non-positive depth")
                if intrinsics is not None:
                    k = intrinsics[o.frame]
                    if not (0 <= o.u < k.width and 0 <= o.v < k.height):
                        raise TrackError(f"track {t.track_id}: pixel outside image")

    def window(self, start: int, stop: int) -> "TrackSet":
        """Observations with ``start <= frame < stop``, re-indexed from 0."""
        out = []
        for t in self.tracks:
            obs = tuple(TrackObservation(o.frame - start, o.u, o.v, o.depth)
                        for o in t.observations if start <= o.frame < stop)
            if len(obs) >= 2:
                out.append(Track(t.track_id, obs))
        return TrackSet(out)

    @classmethod
    def from_jsonl(cls, path) -> "TrackSet":
        return cls([Track(r["id"], tuple(TrackObservation(*o) for o in r["obs"]))
                    for r in read_tracks_jsonl(path)])

    def to_jsonl(self, path) -> None:
        from .io import write_tracks_jsonl

        write_tracks_jsonl(path, self.tracks)


@dataclass
class BaProblem:
    tracks: TrackSet
    intrinsics: Sequence[CameraIntrinsics]
    window_size: int
    depth_weight: float = 1.0
    huber_delta: float | None = 2.0

    def __post_init__(self):
        if isinstance(self.intrinsics, CameraIntrinsics):
            self.intrinsics = [self.intrinsics] * self.window_size
        self.intrinsics = list(self.intrinsics)
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if len(self.intrinsics) != self.window_size:
            raise ValueError("need one CameraIntrinsics per frame")
        if not self.depth_weight > 0:
            raise ValueError("depth_weight must be positive")
        self.tracks.validate(self.window_size)
        self._pairs = _build_pairs(self)

    @property
    def n_pairs(self) -> int:
        return len(self._pairs.fi)


@dataclass
class BaSolution:
    poses: list
    final_cost: float
    iterations: int
    converged: bool
    initial_cost: float = 0.0
    cost_history: list = field(default_factory=list)
    rank_deficient: bool = False
    n_behind: int = 0


@dataclass
class _Pairs:
    fi: np.ndarray
    fj: np.ndarray
    p_cam: np.ndarray
    target: np.ndarray
    kj: np.ndarray
    order: np.ndarray
    starts: np.ndarray
    groups: np.ndarray


def _build_pairs(problem: BaProblem) -> _Pairs:
    fi, fj, pts, tgt, kj = [], [], [], [], []
    ks = problem.intrinsics
    for t in problem.tracks:
        obs = t.observations
        for a in obs:
            k = ks[a.frame]
            p = ((a.u - k.cx) * a.depth / k.fx, (a.v - k.cy) * a.depth / k.fy, a.depth)
            for b in obs:
                if b.frame == a.frame:
                    continue
                kb = ks[b.frame]
                fi.append(a.frame)
                fj.append(b.frame)
                pts.append(p)
                tgt.append((b.u, b.v, b.depth))
                kj.append((kb.fx, kb.fy, kb.cx, kb.cy))
    fi = np.asarray(fi, dtype=int)
    fj = np.asarray(fj, dtype=int)
    gid = fi * problem.window_size + fj
    order = np.argsort(gid, kind="stable")
    sorted_gid = gid[order]
    starts = np.flatnonzero(np.r_[True, sorted_gid[1:] != sorted_gid[:-1]]) if len(gid) else np.zeros(0, int)
    pairs = _Pairs(fi, fj, np.asarray(pts, float).reshape(-1, 3), np.asarray(tgt, float).reshape(-1, 3),
                   np.asarray(kj, float).reshape(-1, 4), order, starts, sorted_gid[starts])
    if not np.all(np.isfinite(pairs.p_cam)) or not np.all(np.isfinite(pairs.target)):
        raise TrackError("NaN in track observations")
    return pairs


def _stack(poses):
    return (np.stack([p.rotation for p in poses]), np.stack([p.translation for p in poses]))


def _raw(problem: BaProblem, poses, with_jacobian: bool = False):
    """Unrobustified residuals (n, 3) and optionally their per-pose blocks."""
    pr = problem._pairs
    rot, trans = _stack(poses)
    ri, rj = rot[pr.fi], rot[pr.fj]
    x = np.einsum("nab,nb->na", ri, pr.p_cam) + trans[pr.fi]
    y = np.einsum("nba,nb->na", rj, x - trans[pr.fj])
    z = y[:, 2]
    behind = z < BEHIND_Z
    zc = np.where(behind, BEHIND_Z, z)
    fx, fy, cx, cy = pr.kj.T
    lam = problem.depth_weight
    pred = np.stack([fx * y[:, 0] / zc + cx, fy * y[:, 1] / zc + cy, zc], axis=1)
    r = pred - pr.target
    r[:, 2] *= lam
    clipped = np.abs(r) > RESIDUAL_CAP
    r = np.clip(r, -RESIDUAL_CAP, RESIDUAL_CAP)
    if not with_jacobian:
        return r, behind, None, None
    n = len(z)
    jp = np.zeros((n, 3, 3))
    jp[:, 0, 0] = fx / zc
    jp[:, 1, 1] = fy / zc
    live = ~behind
    jp[live, 0, 2] = -fx[live] * y[live, 0] / zc[live] ** 2
    jp[live, 1, 2] = -fy[live] * y[live, 1] / zc[live] ** 2
    jp[live, 2, 2] = lam
    jp[clipped] = 0.0
    rjt = np.transpose(rj, (0, 2, 1))
    dyi = np.empty((n, 3, 6))
    m = rjt @ ri
    dyi[:, :, :3] = m
    dyi[:, :, 3:] = -m @ _hat_batch(pr.p_cam)
    dyj = np.empty((n, 3, 6))
    dyj[:, :, :3] = -np.eye(3)
    dyj[:, :, 3:] = _hat_batch(y)
    return r, behind, jp @ dyi, jp @ dyj


def _hat_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def _robust(problem: BaProblem, r: np.ndarray):
    """Huber-rescaled residuals and the per-pair scaling Jacobian (or None)."""
    d = problem.huber_delta
    if d is None:
        return r, None
    n = np.linalg.norm(r, axis=1)
    big = n > d
    if not big.any():
        return r, None
    s = np.ones_like(n)
    root = np.sqrt(d * (2 * n[big] - d))
    s[big] = root / n[big]
    ds = np.zeros_like(n)
    ds[big] = (d / root * n[big] - root) / n[big] ** 2
    scale = s[:, None, None] * np.eye(3) + (ds / np.maximum(n, 1e-300))[:, None, None] * (
        r[:, :, None] * r[:, None, :])
    return r * s[:, None], scale


def residual(problem: BaProblem, poses) -> np.ndarray:
    """Flattened (3 per ordered pair) robustified residual vector."""
    if len(poses) != problem.window_size:
        raise ValueError("need one pose per frame in the window")
    r, behind, _, _ = _raw(problem, poses)
    if behind.any():
        log.debug("%d pair projections land behind the camera", int(behind.sum()))
    return _robust(problem, r)[0].ravel()


def cost(problem: BaProblem, poses) -> float:
    r = residual(problem, poses)
    return float(r @ r)


def jacobian(problem: BaProblem, poses) -> np.ndarray:
    """Dense analytic Jacobian w.r.t. right twists of all T poses, shape (3n, 6T)."""
    r, _, ji, jj = _raw(problem, poses, with_jacobian=True)
    _, scale = _robust(problem, r)
    if scale is not None:
        ji, jj = scale @ ji, scale @ jj
    pr = problem._pairs
    n = len(r)
    out = np.zeros((n, 3, 6 * problem.window_size))
    rows = np.arange(n)
    for c in range(6):
        out[rows, :, 6 * pr.fi + c] += ji[:, :, c]
        out[rows, :, 6 * pr.fj + c] += jj[:, :, c]
    return out.reshape(3 * n, -1)


def jacobian_fd(problem: BaProblem, poses, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian matching :func:`jacobian`."""
    cols = []
    for f in range(problem.window_size):
        for c in range(6):
            e = np.zeros(6)
            e[c] = step
            plus = list(poses)
            minus = list(poses)
            plus[f] = compose(poses[f], se3_exp(e))
            minus[f] = compose(poses[f], se3_exp(-e))
            cols.append((residual(problem, plus) - residual(problem, minus)) / (2 * step))
    return np.stack(cols, axis=1)


def _normal_equations(problem: BaProblem, poses):
    r, behind, ji, jj = _raw(problem, poses, with_jacobian=True)
    rr, scale = _robust(problem, r)
    if scale is not None:
        ji, jj = scale @ ji, scale @ jj
    pr = problem._pairs
    t = problem.window_size
    jc = np.concatenate([ji, jj], axis=2)[pr.order]
    blocks = np.add.reduceat(np.einsum("nka,nkb->nab", jc, jc), pr.starts, axis=0)
    grads = np.add.reduceat(np.einsum("nka,nk->na", jc, rr[pr.order]), pr.starts, axis=0)
    h = np.zeros((6 * t, 6 * t))
    g = np.zeros(6 * t)
    for gid, blk, gr in zip(pr.groups, blocks, grads):
        i, j = divmod(int(gid), t)
        si, sj = slice(6 * i, 6 * i + 6), slice(6 * j, 6 * j + 6)
        h[si, si] += blk[:6, :6]
        h[si, sj] += blk[:6, 6:]
        h[sj, si] += blk[6:, :6]
        h[sj, sj] += blk[6:, 6:]
        g[si] += gr[:6]
        g[sj] += gr[6:]
    return h, g, float(rr.ravel() @ rr.ravel()), int(behind.sum())


def _retract(poses, delta):
    out = [poses[0]]
    for k in range(1, len(poses)):
        p = compose(poses[k], se3_exp(delta[6 * (k - 1):6 * k]))
        out.append(Pose(orthonormalize(p.rotation), p.translation))
    return out


def solve(problem: BaProblem, init=None, max_iterations: int = 200, rel_tol: float = 1e-10,
          step_tol: float = 1e-10) -> BaSolution:
    """Levenberg-Marquardt over poses 1..T-1 with pose 0 pinned to identity."""
    t = problem.window_size
    if init is None:
        poses = [Pose.identity() for _ in range(t)]
    else:
        if len(init) != t:
            raise ValueError("init must have one pose per frame")
        g0 = inverse(init[0])
        poses = [compose(g0, p) for p in init]
        poses[0] = Pose.identity()
    h, g, c, n_behind = _normal_equations(problem, poses)
    history = [c]
    initial = c
    lam = None
    converged = False
    iterations = 0
    rank_deficient = False
    for _ in range(max_iterations):
        if c == 0.0:
            converged = True
            break
        hr, gr = h[6:, 6:], g[6:]
        diag = np.diag(hr).copy()
        if np.any(diag <= 1e-12 * max(diag.max(), 1.0)):
            rank_deficient = True
        diag = np.maximum(diag, 1e-9 * max(diag.max(), 1e-12))
        if lam is None:
            lam = 1e-4
        accepted = False
        while lam < 1e16:
            try:
                delta = np.linalg.solve(hr + lam * np.diag(diag), -gr)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            if np.linalg.norm(delta) < step_tol:
                converged = True
                break
            trial = _retract(poses, delta)
            h2, g2, c2, nb2 = _normal_equations(problem, trial)
            if c2 < c:
                rel = (c - c2) / c
                poses, h, g, c, n_behind = trial, h2, g2, c2, nb2
                history.append(c)
                iterations += 1
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if rel < rel_tol:
                    converged = True
                break
            lam *= 4.0
        if converged or not accepted:
            if not accepted and not converged:
                converged = lam >= 1e16 and np.linalg.norm(gr) < 1e-8 * max(1.0, c)
            break
    else:
        log.warning("bundle adjustment hit the iteration cap (%d)", max_iterations)
    try:
        if np.linalg.matrix_rank(h[6:, 6:]) < h.shape[0] - 6:
            rank_deficient = True
    except np.linalg.LinAlgError:
        rank_deficient = True
    return BaSolution(poses, c, iterations, converged, initial, history, rank_deficient, n_behind)


def align_to_first(poses, reference: Pose) -> list:
    """Left-multiply a gauge-fixed trajectory so its first pose equals ``reference``."""
    g = compose(reference, inverse(poses[0]))
    return [compose(g, p) for p in poses]


def _rigid_fit(src, dst) -> Pose:
    """Rigid G minimising sum ||G * src_k - dst_k||_F^2 over pose pairs."""
    if len(src) == 1:
        return compose(dst[0], inverse(src[0]))
    ts = np.array([p.translation for p in src])
    td = np.array([p.translation for p in dst])
    ms, md = ts.mean(axis=0), td.mean(axis=0)
    m = sum(d.rotation @ s.rotation.T for s, d in zip(src, dst)) + (td - md).T @ (ts - ms)
    rot = orthonormalize(m)
    return Pose(rot, md - rot @ ms)


def chain_windows(solutions: Sequence, overlap: int) -> list:
    """Stitch per-window trajectories sharing ``overlap`` frames into one.

    Window k+1 is rigidly re-anchored onto the already-chained poses of the
    shared frames (least squares over rotation and translation).  Shared
    frames keep the earlier window's estimate.
    """
    if overlap < 1:
        raise ValueError("consecutive windows must overlap by at least one frame")
    wins = [s.poses if isinstance(s, BaSolution) else list(s) for s in solutions]
    if not wins:
        return []
    out = list(wins[0])
    for w in wins[1:]:
        if len(w) <= overlap or len(out) < overlap:
            raise ValueError("window shorter than the overlap")
        g = _rigid_fit(w[:overlap], out[-overlap:])
        out.extend(compose(g, p) for p in w[overlap:])
    return out


def window_starts(n_frames: int, window: int, overlap: int) -> list[int]:
    if window < 2:
        raise ValueError("window must be >= 2")
    if not 1 <= overlap < window:
        raise ValueError("overlap must satisfy 1 <= overlap < window")
    starts = [0]
    while starts[-1] + window < n_frames:
        nxt = starts[-1] + window - overlap
        if n_frames - nxt <= overlap:
            break
        starts.append(nxt)
    return starts


def solve_sequence(tracks: TrackSet, intrinsics, n_frames: int, window: int = 16, overlap: int = 4,
                   depth_weight: float = 1.0, huber_delta: float | None = 2.0, init=None):
    """Solve overlapping windows over a whole sequence and chain them.

    Returns (global poses, list of per-window solutions).
    """
    if isinstance(intrinsics, CameraIntrinsics):
        intrinsics = [intrinsics] * n_frames
    sols = []
    starts = window_starts(n_frames, window, overlap)
    for a in starts:
        b = min(a + window, n_frames)
        sub = tracks.window(a, b)
        prob = BaProblem(sub, intrinsics[a:b], b - a, depth_weight, huber_delta)
        sols.append(solve(prob, None if init is None else init[a:b]))
    if len(sols) == 1:
        return sols[0].poses, sols
    # the last window may be shorter; chain with the actual overlaps
    out = list(sols[0].poses)
    for prev_a, a, sol in zip(starts, starts[1:], sols[1:]):
        ov = len(out) - a
        out = chain_windows([out, sol.poses], ov)
    return out, sols
