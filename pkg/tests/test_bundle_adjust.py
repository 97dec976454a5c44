import numpy as np
import pytest

from colonpipe.bundle_adjust import (BaProblem, Track, TrackError, TrackObservation, TrackSet, align_to_first,
                                     chain_windows, cost, jacobian, jacobian_fd, residual, solve, solve_sequence,
                                     window_starts)
from colonpipe.geometry import (CameraIntrinsics, Pose, compose, inverse, pose_error, project_array, se3_exp,
                                transform)
from colonpipe.synthcolon import oracle_tracks

K = CameraIntrinsics.from_fov(96, 96, 90.0)


def synthetic(rng, t=4, n_pts=30, step=1.5, noise=0.0):
    """Camera moving along +z inside a cloud of points; every point seen by every frame."""
    poses = [Pose.identity()] + [se3_exp(np.r_[rng.normal(0, 0.3, 2), step * k, rng.normal(0, 0.03, 3)])
                                 for k in range(1, t)]
    pts = np.c_[rng.uniform(-8, 8, (n_pts, 2)), rng.uniform(25, 45, n_pts)]
    tracks = []
    for n, p in enumerate(pts):
        obs = []
        for f, pose in enumerate(poses):
            u, v, z = project_array(transform(inverse(pose), p), K)
            u, v = u + rng.normal(0, noise) if noise else u, v + rng.normal(0, noise) if noise else v
            obs.append(TrackObservation(f, float(u), float(v), float(z)))
        tracks.append(Track(n, tuple(obs)))
    return TrackSet(tracks), poses


def perturb(poses, rng, scale):
    return [poses[0]] + [compose(p, se3_exp(rng.normal(0, scale, 6))) for p in poses[1:]]


def oracle_residual(tracks, ks, poses, lam):
    """Straight-line transform-project composition, one observation pair at a time."""
    out = []
    for t in tracks:
        for a in t.observations:
            ka = ks[a.frame]
            p = np.array([(a.u - ka.cx) * a.depth / ka.fx, (a.v - ka.cy) * a.depth / ka.fy, a.depth])
            world = poses[a.frame].rotation @ p + poses[a.frame].translation
            for b in t.observations:
                if b.frame == a.frame:
                    continue
                kb = ks[b.frame]
                q = poses[b.frame].rotation.T @ (world - poses[b.frame].translation)
                out += [kb.fx * q[0] / q[2] + kb.cx - b.u, kb.fy * q[1] / q[2] + kb.cy - b.v,
                        lam * (q[2] - b.depth)]
    return np.array(out)


def test_zero_residual_at_truth(rng):
    tracks, poses = synthetic(rng)
    prob = BaProblem(tracks, K, 4, huber_delta=None)
    assert np.abs(residual(prob, poses)).max() < 1e-9


def test_two_frames_single_point():
    tr = TrackSet([Track(0, (TrackObservation(0, 40.0, 50.0, 20.0), TrackObservation(1, 40.0, 50.0, 20.0)))])
    prob = BaProblem(tr, K, 2)
    assert np.all(residual(prob, [Pose.identity(), Pose.identity()]) == 0)


def test_residual_matches_oracle(rng):
    tracks, poses = synthetic(rng, t=5, n_pts=10)
    prob = BaProblem(tracks, [K] * 5, 5, depth_weight=0.7, huber_delta=None)
    for _ in range(5):
        rand = [se3_exp(rng.normal(0, [1, 1, 1, 0.05, 0.05, 0.05])) for _ in range(5)]
        np.testing.assert_allclose(residual(prob, rand), oracle_residual(tracks, [K] * 5, rand, 0.7), atol=1e-9)


def test_behind_camera_is_capped(rng):
    tracks, poses = synthetic(rng, t=2, n_pts=3)
    flipped = [poses[0], compose(poses[1], se3_exp([0, 0, 0, np.pi, 0, 0]))]
    r = residual(BaProblem(tracks, K, 2, huber_delta=None), flipped)
    assert np.all(np.isfinite(r)) and np.abs(r).max() <= 1e3


@pytest.mark.parametrize("huber", [None, 2.0])
def test_analytic_jacobian_matches_fd(rng, huber):
    tracks, poses = synthetic(rng, t=3, n_pts=8, noise=1.0)
    prob = BaProblem(tracks, K, 3, huber_delta=huber)
    for _ in range(100 if huber is None else 20):
        cfg = perturb(poses, rng, 0.02)
        ja, jf = jacobian(prob, cfg), jacobian_fd(prob, cfg)
        assert np.abs(ja - jf).max() <= 1e-4 * max(1.0, np.abs(jf).max())


def test_recovery_noise_free(rng):
    tracks, poses = synthetic(rng, t=6)
    sol = solve(BaProblem(tracks, K, 6, huber_delta=None))
    assert sol.converged and sol.poses[0].allclose(Pose.identity(), 0)
    for p, q in zip(sol.poses, poses):
        rot, trans = pose_error(p, q)
        assert rot < 1e-6 and trans < 1e-5
    assert all(b <= a for a, b in zip(sol.cost_history, sol.cost_history[1:]))
    assert sol.final_cost <= sol.initial_cost


def test_optimal_init_stays_put(rng):
    tracks, poses = synthetic(rng)
    prob = BaProblem(tracks, K, 4, huber_delta=None)
    sol = solve(prob, poses)
    assert sol.iterations <= 1
    assert sol.final_cost == pytest.approx(cost(prob, poses), abs=1e-12)


def test_gauge_invariance(rng):
    tracks, poses = synthetic(rng, t=5, noise=0.3)
    prob = BaProblem(tracks, K, 5)
    init = perturb(poses, rng, 0.01)
    g = se3_exp([10.0, -4.0, 3.0, 0.4, -0.2, 0.9])
    a = solve(prob, init).poses
    b = solve(prob, [compose(g, p) for p in init]).poses
    assert all(p.allclose(q, atol=1e-6) for p, q in zip(a, b))


def test_optimum_beats_perturbations(rng):
    tracks, poses = synthetic(rng, t=4, noise=0.5)
    prob = BaProblem(tracks, K, 4, huber_delta=None)
    sol = solve(prob, poses)
    for _ in range(1000):
        assert sol.final_cost <= cost(prob, perturb(sol.poses, rng, 1e-3 / np.sqrt(6)))


def test_noise_level_matches_residual_share():
    # pixel noise on both ends of each pair, depth untouched: 2 of 3 components carry variance 2 sigma^2
    sigma = 0.5
    rms = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        tracks, poses = synthetic(rng, t=4, n_pts=40, noise=sigma)
        prob = BaProblem(tracks, K, 4, huber_delta=None)
        r = residual(prob, solve(prob, poses).poses)
        rms.append(np.sqrt(np.mean(r ** 2)))
    expected = sigma * np.sqrt(4.0 / 3.0)
    assert abs(np.mean(rms) - expected) <= 0.2 * expected


def test_track_validation():
    bad = TrackSet([Track(0, (TrackObservation(0, 1, 1, 1.0), TrackObservation(0, 2, 2, 1.0)))])
    with pytest.raises(TrackError):
        BaProblem(bad, K, 2)
    bad = TrackSet([Track(0, (TrackObservation(0, 1, 1, 1.0), TrackObservation(5, 2, 2, 1.0)))])
    with pytest.raises(TrackError):
        BaProblem(bad, K, 2)
    bad = TrackSet([Track(0, (TrackObservation(0, 1, 1, -1.0), TrackObservation(1, 2, 2, 1.0)))])
    with pytest.raises(TrackError):
        BaProblem(bad, K, 2)
    bad = TrackSet([Track(0, (TrackObservation(0, np.nan, 1, 1.0), TrackObservation(1, 2, 2, 1.0)))])
    with pytest.raises(TrackError):
        BaProblem(bad, K, 2)
    with pytest.raises(ValueError):
        BaProblem(TrackSet(), K, 1)


def test_track_window_reindexes():
    tr = TrackSet([Track(0, tuple(TrackObservation(f, 1.0, 1.0, 1.0) for f in range(6)))])
    w = tr.window(2, 5)
    assert [o.frame for o in w.tracks[0].observations] == [0, 1, 2]
    assert len(tr.window(5, 9)) == 0


def test_jsonl_roundtrip(tmp_path, rng):
    tracks, _ = synthetic(rng, t=3, n_pts=4)
    tracks.to_jsonl(tmp_path / "t.jsonl")
    back = TrackSet.from_jsonl(tmp_path / "t.jsonl")
    assert back.tracks == tracks.tracks


def test_window_starts():
    assert window_starts(16, 16, 4) == [0]
    assert window_starts(28, 16, 4) == [0, 12]
    starts = window_starts(64, 16, 4)
    assert starts[0] == 0 and starts[-1] + 16 >= 64
    assert all(b - a == 12 for a, b in zip(starts, starts[1:]))
    with pytest.raises(ValueError):
        window_starts(20, 16, 0)


def test_chain_windows(rng):
    gt = [se3_exp(rng.normal(0, [3, 3, 3, 0.2, 0.2, 0.2])) for _ in range(10)]
    w1, w2 = gt[:6], gt[3:]
    g1, g2 = inverse(w1[0]), se3_exp([5.0, 1.0, -2.0, 0.3, 0.1, -0.4])
    chained = chain_windows([[compose(g1, p) for p in w1], [compose(g2, p) for p in w2]], 3)
    assert len(chained) == 10
    out = align_to_first(chained, gt[0])
    assert all(p.allclose(q, atol=1e-6) for p, q in zip(out, gt))
    assert chain_windows([gt], 2) == gt
    same = chain_windows([gt[:5], gt[3:5] + gt[5:8]], 2)
    assert all(p.allclose(q, atol=1e-12) for p, q in zip(same, gt[:8]))
    with pytest.raises(ValueError):
        chain_windows([w1, w2], 0)


def test_oracle_tracks_recover_rendered_trajectory(rendered):
    traj, frames = rendered
    tracks = oracle_tracks(frames, grid_stride=12, window=16)
    prob = BaProblem(tracks, traj.intrinsics, 16, huber_delta=None)
    gt = [f.pose for f in frames]
    rel = align_to_first(gt, Pose.identity())
    assert np.abs(residual(prob, rel)).max() < 1e-6
    sol = solve(prob)
    out = align_to_first(sol.poses, gt[0])
    for p, q in zip(out, gt):
        rot, trans = pose_error(p, q)
        assert rot < 1e-4 and trans < 1e-3


def test_solve_sequence_chains(rendered):
    traj, frames = rendered
    tracks = oracle_tracks(frames, grid_stride=16, window=8)
    poses, sols = solve_sequence(tracks, traj.intrinsics, 16, window=8, overlap=3, huber_delta=None)
    assert len(sols) == 3 and len(poses) == 16
    out = align_to_first(poses, frames[0].pose)
    for p, f in zip(out, frames):
        rot, trans = pose_error(p, f.pose)
        assert rot < 1e-4 and trans < 1e-3
