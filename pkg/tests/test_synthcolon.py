import json
import math

import numpy as np
import pytest
from scipy.optimize import brentq

from colonpipe.geometry import CameraIntrinsics, Pose, backproject_array, pixel_grid, transform
from colonpipe.io import read_pfm
from colonpipe.synthcolon import (Lighting, PhantomError, PhantomSpec, Polyp, TrajectoryError, TrajectorySpec,
                                  base_intrinsics, build_phantom, export_dataset, load_dataset, oracle_tracks,
                                  render, render_sequence, sample_trajectory)
from colonpipe.synthcolon.render import render_radiance
from oracles import axial_pose, cylinder, cylinder_depth

K64 = CameraIntrinsics.from_fov(64, 64, 90.0)


def test_cylinder_sdf_is_exact(rng):
    ph = cylinder(15.0)
    r = rng.uniform(0, 30, 200)
    ang = rng.uniform(0, 2 * math.pi, 200)
    z = rng.uniform(1, 199, 200)
    p = np.c_[r * np.cos(ang), r * np.sin(ang), z]
    np.testing.assert_allclose(ph.sdf(p), r - 15.0, atol=1e-9)


def _radial_samples(phantom, rng, n):
    """Random interior points with their axis point and unit radial direction."""
    p = phantom.point_at(rng.uniform(5, phantom.length - 5, n)) + rng.normal(0, 4, (n, 3))
    q = phantom.query(p)
    centre = phantom.point_at(q.s)
    return centre, (p - centre) / q.rho[:, None], q


def test_surface_points_by_radial_root_finding(phantom, rng):
    centre, direc, q = _radial_samples(phantom, rng, 40)
    for i in range(40):
        rho = brentq(lambda t: phantom.sdf(centre[i] + t * direc[i]), 0.1, 40.0, xtol=1e-13)
        assert rho == pytest.approx(q.radius[i], abs=1e-6)
        assert abs(phantom.sdf(centre[i] + q.radius[i] * direc[i])) < 1e-6


def test_eikonal_near_surface(phantom, rng):
    centre, direc, q = _radial_samples(phantom, rng, 200)
    p = centre + (q.radius + rng.uniform(-1, 1, 200))[:, None] * direc
    h = 1e-5
    grads = np.stack([(phantom.sdf(p + h * e) - phantom.sdf(p - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    assert np.all(np.abs(np.linalg.norm(grads, axis=1) - 1.0) < 0.05)


def test_phantom_validation():
    with pytest.raises(PhantomError):
        PhantomSpec(base_radius=-1.0)
    with pytest.raises(PhantomError):
        PhantomSpec(haustra_amplitude=1.0)
    with pytest.raises(PhantomError):
        PhantomSpec(base_radius=5.0, polyps=(Polyp(10, 0, 4.5, 3), Polyp(20, 1, 4.5, 3)))
    with pytest.raises(PhantomError):
        PhantomSpec(centerline=((0, 0, 0),))
    spec = PhantomSpec(polyps=(Polyp(50, 1.0, 3, 5),))
    assert PhantomSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_polyp_label_and_bump():
    ph = build_phantom(PhantomSpec(haustra_amplitude=0.0, polyps=(Polyp(100, 0.0, 5.0, 6.0),)))
    r, _, _ = ph.radius(np.array([100.0]), np.array([0.0]))
    assert r[0] == pytest.approx(10.0)
    assert ph.label_at(np.array([100.0, 100.0, 160.0]), np.array([0.0, 0.3, 0.0])).tolist() == [1, 1, 0]
    assert ph.label_at(np.array([106.1]), np.array([0.0]))[0] == 0


def test_trajectory_uniform_arclength(phantom):
    tr = sample_trajectory(TrajectorySpec(n_frames=20, speed_min=2.5, speed_max=2.5, start_s=10), phantom)
    np.testing.assert_allclose(np.diff(tr.arclength), 2.5, atol=1e-6)
    centres = np.array([p.translation for p in tr.poses])
    np.testing.assert_allclose(centres, phantom.point_at(tr.arclength), atol=1e-9)


def test_trajectory_flip_and_determinism(phantom):
    base = TrajectorySpec(n_frames=12, speed_min=1.0, speed_max=3.0, tilt_deg=4.0, seed=9)
    a = sample_trajectory(base, phantom)
    b = sample_trajectory(base, phantom)
    assert all(p.allclose(q, 0) for p, q in zip(a.poses, b.poses))
    flipped = sample_trajectory(TrajectorySpec(**{**base.to_dict(), "flip_segments": ((0, 12),)}), phantom)
    assert all(p.allclose(q, 0) for p, q in zip(flipped.poses, a.poses[::-1]))
    part = sample_trajectory(TrajectorySpec(**{**base.to_dict(), "flip_segments": ((3, 7),)}), phantom)
    order = [0, 1, 2, 6, 5, 4, 3, 7, 8, 9, 10, 11]
    assert all(p.allclose(a.poses[i], 0) for p, i in zip(part.poses, order))


def test_trajectory_jitter_and_attenuation_bounds(phantom):
    for seed in range(10):
        spec = TrajectorySpec(n_frames=3, intrinsics_jitter_pct=0.1, attenuation_range=(0.3, 0.8), seed=seed)
        tr = sample_trajectory(spec, phantom)
        k0, k = base_intrinsics(spec), tr.intrinsics[0]
        assert all(ki == k for ki in tr.intrinsics)
        assert abs(k.fx / k0.fx - 1) <= 0.1 and abs(k.fy / k0.fy - 1) <= 0.1
        assert 0.3 <= tr.attenuation <= 0.8


def test_trajectory_rejections(phantom):
    with pytest.raises(TrajectoryError):
        TrajectorySpec(flip_segments=((5, 40),))
    with pytest.raises(TrajectoryError):
        sample_trajectory(TrajectorySpec(n_frames=50, speed_min=10, speed_max=10, max_retries=2), phantom)
    with pytest.raises(TrajectoryError):
        sample_trajectory(TrajectorySpec(n_frames=2, lateral_offset=30.0, max_retries=3), phantom)


def test_cylinder_render_matches_closed_form():
    ph = cylinder(15.0, 200.0)
    k = CameraIntrinsics.from_fov(48, 40, 100.0)
    _, depth, mask, _ = render_radiance(ph, axial_pose(20.0), k)
    ref, hit, sure = cylinder_depth(k, 15.0, 20.0, 200.0)
    assert np.array_equal(mask[sure], hit[sure])
    both = mask & hit
    assert np.abs(depth[both] - ref[both]).max() < 1e-3


def test_rendered_hits_lie_on_surface(rendered, phantom):
    _, frames = rendered
    worst = 0.0
    for fr in frames[::5]:
        u, v = pixel_grid(fr.intrinsics)
        pts = transform(fr.pose, backproject_array(u[fr.mask], v[fr.mask], fr.depth[fr.mask], fr.intrinsics))
        worst = max(worst, np.abs(phantom.sdf(pts)).max())
    assert worst < 2e-3


def test_attenuation_linearity():
    ph = cylinder(15.0, 200.0)
    pose = axial_pose(20.0)
    r1, d1, _, _ = render_radiance(ph, pose, K64, Lighting(attenuation=0.4))
    r2, d2, _, _ = render_radiance(ph, pose, K64, Lighting(attenuation=0.8))
    assert np.array_equal(2 * r1, r2) and np.array_equal(d1, d2)
    dark = render(ph, pose, K64, Lighting(attenuation=0.0))
    assert not dark.intensity.any() and np.array_equal(dark.depth, d1)


def test_inverse_square_falloff():
    # same pixel, same incidence angle: scaling the tube scales only the hit distance
    lam = Lighting(specular=0.0)
    rads = [render_radiance(cylinder(r, 400.0), axial_pose(10.0), K64, lam)[0][5, 5] for r in (8.0, 12.0, 16.0)]
    assert rads[0] > rads[1] > rads[2] > 0
    assert rads[0] / rads[1] == pytest.approx((12 / 8) ** 2, rel=1e-6)


def test_tone_mapping_fixed_by_first_frame(rendered):
    _, frames = rendered
    v = frames[0].intensity[frames[0].mask]
    assert np.percentile(v, 95) == pytest.approx(0.9, abs=1e-9)
    assert all(f.intensity.min() >= 0 and f.intensity.max() <= 1 for f in frames)


def test_static_camera_tracks_are_identical(phantom):
    spec = TrajectorySpec(n_frames=3, speed_min=0.0, speed_max=0.0, width=48, height=48)
    tr = sample_trajectory(spec, phantom)
    frames = render_sequence(phantom, tr.poses, tr.intrinsics)
    tracks = oracle_tracks(frames, grid_stride=8, window=3)
    assert len(tracks) > 0
    for t in tracks:
        first = t.observations[0]
        for o in t.observations[1:]:
            assert (o.u, o.v) == pytest.approx((first.u, first.v), abs=1e-9)
            assert o.depth == pytest.approx(first.depth, rel=1e-9)


def test_occluded_points_are_dropped():
    # a tall polyp seen first head-on, then from beyond it looking back
    ph = build_phantom(PhantomSpec(haustra_amplitude=0.0, polyps=(Polyp(60.0, 0.0, 9.0, 8.0),)))
    k = CameraIntrinsics.from_fov(64, 64, 100.0)
    from colonpipe.geometry import look_rotation

    a = Pose(look_rotation([0.0, 0.3, 1.0], [1.0, 0.0, 0.0]), np.array([-4.0, 0.0, 35.0]))
    b = Pose(look_rotation([0.3, 0.0, 1.0], [0.0, 1.0, 0.0]), np.array([-6.0, 0.0, 48.0]))
    frames = [render(ph, p, k) for p in (a, b)]
    tracks = oracle_tracks(frames, grid_stride=2, window=2, origin_stride=1)
    from colonpipe.geometry import inverse, project_array

    dropped = 0
    for fi, fj in ((0, 1), (1, 0)):
        src, dst = frames[fi], frames[fj]
        v, u = np.mgrid[2:62:2, 2:62:2]
        sel = src.mask[v, u]
        world = transform(src.pose, backproject_array(u[sel], v[sel], src.depth[v, u][sel], k))
        uu, vv, zz = project_array(transform(inverse(dst.pose), world), k)
        inside = (zz > 0) & (uu >= 0) & (vv >= 0) & (uu <= 62) & (vv <= 62)
        ui, vi = np.round(uu[inside]).astype(int), np.round(vv[inside]).astype(int)
        dropped += np.count_nonzero(dst.depth[vi, ui] < 0.9 * zz[inside])
    assert dropped > 0
    # every kept observation agrees with the rendered depth where it lands
    for t in tracks:
        for o in t.observations:
            d = frames[o.frame].depth
            iu, iv = int(o.u), int(o.v)
            local = d[iv:iv + 2, iu:iu + 2]
            assert local.min() * 0.97 <= o.depth <= local.max() * 1.03


def test_export_layout_and_roundtrip(tmp_path, phantom):
    tr = sample_trajectory(TrajectorySpec(n_frames=1, width=32, height=24), phantom)
    frames = render_sequence(phantom, tr.poses, tr.intrinsics)
    files = export_dataset(frames, tmp_path / "d")
    names = sorted(p.name for p in files)
    assert names == sorted(["frame_00000_intensity.png", "frame_00000_depth.pfm", "frame_00000_label.png",
                            "poses.json", "intrinsics.json", "manifest.json"])
    assert np.array_equal(read_pfm(tmp_path / "d" / "frame_00000_depth.pfm"),
                          np.where(frames[0].mask, frames[0].depth, 0))
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["n_frames"] == 1
    back = load_dataset(tmp_path / "d")
    assert back[0].pose.allclose(frames[0].pose, 0) and back[0].intrinsics == frames[0].intrinsics
