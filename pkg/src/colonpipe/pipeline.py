"""Scene loading, run manifests and the end-to-end demo pipeline."""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bundle_adjust import align_to_first, solve_sequence
from .coverage import assess, to_image
from .depth_eval import DepthSequence, evaluate
from .geometry import pose_error, save_poses
from .io import file_sha256, write_pfm, write_png8
from .plotting import plot_coverage, plot_metrics, plot_trajectory
from .reconstruct import fuse, voxel_downsample
from .synthcolon import (Lighting, PhantomSpec, TrajectorySpec, build_phantom, default_phantom,
                         export_dataset, oracle_tracks, render_sequence, sample_trajectory)
from .validate import validate_formats

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``code`` is the process exit status to use."""

    def __init__(self, stage: str, message: str, code: int):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.code = code


EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_VALIDATION = 0, 2, 3, 4, 5


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int | None = None
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    tool_version: str = __version__

    def add_input(self, path) -> None:
        p = Path(path)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            self.inputs[str(q)] = file_sha256(q)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


# -- scenes ------------------------------------------------------------------

@dataclass(frozen=True)
class Scene:
    phantom: PhantomSpec
    trajectory: TrajectorySpec
    lighting: Lighting

    def to_dict(self) -> dict:
        return {"phantom": self.phantom.to_dict(), "trajectory": self.trajectory.to_dict(),
                "lighting": asdict(self.lighting)}


def scene_from_dict(d: dict | None, frames: int | None = None, size=None, seed: int | None = None) -> Scene:
    """Parse ``{"phantom": ..., "trajectory": ..., "lighting": ...}``.

    A missing or ``"default"`` phantom selects the curved demo phantom.
    ``frames``, ``size`` (w, h) and ``seed`` override the trajectory block.
    """
    d = dict(d or {})
    unknown = set(d) - {"phantom", "trajectory", "lighting"}
    if unknown:
        raise ValueError(f"unknown scene keys: {sorted(unknown)}")
    ph = d.get("phantom", "default")
    phantom = default_phantom() if ph in (None, "default") else PhantomSpec.from_dict(ph)
    traj = dict(d.get("trajectory", {}))
    if frames is not None:
        traj["n_frames"] = int(frames)
    if size is not None:
        traj["width"], traj["height"] = int(size[0]), int(size[1])
    if seed is not None:
        traj["seed"] = int(seed)
    return Scene(phantom, TrajectorySpec.from_dict(traj), Lighting(**d.get("lighting", {})))


def load_scene(path, **overrides) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()), **overrides)


def render_scene(scene: Scene, threads: int = 1):
    """Sample the fly-through and render it; returns (phantom, trajectory, frames)."""
    phantom = build_phantom(scene.phantom)
    traj = sample_trajectory(scene.trajectory, phantom)
    light = Lighting(scene.lighting.attenuation * traj.attenuation, scene.lighting.diffuse,
                     scene.lighting.specular, scene.lighting.shininess)
    frames = render_sequence(phantom, traj.poses, traj.intrinsics, light, threads=threads)
    return phantom, traj, frames


def perturb_depth(gt: DepthSequence, rel_sigma: float, seed: int, scale: float = 0.5,
                  shift: float = 2.0) -> DepthSequence:
    """Stand-in prediction: multiplicative noise then an unknown affine map."""
    rng = np.random.default_rng(seed)
    noisy = gt.values * np.exp(rng.normal(0.0, rel_sigma, size=gt.values.shape))
    return DepthSequence(np.where(gt.mask, scale * noisy + shift, 0.0), gt.mask)


# -- pipeline ----------------------------------------------------------------

DEFAULT_PIPELINE = {
    "frames": 32,
    "size": [256, 256],
    "eval": {"domain": "depth", "bootstrap": 200, "noise": 0.05},
    "ba": {"window": 16, "overlap": 4, "grid_stride": 16, "pixel_noise": 0.0, "depth_weight": 1.0},
    "reconstruct": {"voxel": 1.0, "stride": 2},
    "coverage": {"bins": [256, 64], "open": 1, "close": 2},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_pipeline_config(config: dict | None = None) -> dict:
    cfg = _merge(DEFAULT_PIPELINE, config or {})
    cfg.setdefault("scene", {})
    unknown = set(cfg) - set(DEFAULT_PIPELINE) - {"scene"}
    if unknown:
        raise ValueError(f"unknown pipeline keys: {sorted(unknown)}")
    return cfg


def _stage(name, code, fn, *args, **kwargs):
    log.info("stage %s", name)
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except OSError as exc:
        raise StageError(name, str(exc), EXIT_IO) from exc
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise StageError(name, str(exc), code) from exc


def _run_stages(cfg: dict, seed: int, out: Path, threads: int) -> dict:
    scene = _stage("config", EXIT_CONFIG, scene_from_dict, cfg["scene"], cfg["frames"], cfg["size"], seed)
    _, traj, frames = _stage("render", EXIT_NUMERICAL, render_scene, scene, threads)
    for i, fr in enumerate(frames):
        if not fr.mask.any():
            raise StageError("render", f"frame {i} has no surface hits", EXIT_NUMERICAL)
    _stage("render", EXIT_IO, export_dataset, frames, out / "dataset", scene.to_dict())

    # depth evaluation against a perturbed copy of ground truth
    e = cfg["eval"]
    gt = DepthSequence(np.stack([f.depth for f in frames]), np.stack([f.mask for f in frames]))
    pred = _stage("eval", EXIT_NUMERICAL, perturb_depth, gt, float(e["noise"]), seed)
    (out / "pred").mkdir()
    for i, v in enumerate(pred.values):
        write_pfm(out / "pred" / f"frame_{i:05d}_depth.pfm", v)
    params, report = _stage("eval", EXIT_NUMERICAL, evaluate, pred, gt, e["domain"], int(e["bootstrap"]), seed)
    if not all(np.isfinite(report.value(m)) for m in ("delta1", "abs_rel", "sq_rel", "rmse_mm")):
        raise StageError("eval", "non-finite metrics", EXIT_NUMERICAL)
    (out / "metrics.json").write_text(report.to_json())
    plot_metrics(report, out / "metrics.png")

    # poses from oracle tracks
    b = cfg["ba"]
    tracks = _stage("poses", EXIT_NUMERICAL, oracle_tracks, frames, int(b["grid_stride"]), int(b["window"]),
                    float(b["pixel_noise"]), seed)
    tracks.to_jsonl(out / "tracks.jsonl")
    poses, sols = _stage("poses", EXIT_NUMERICAL, solve_sequence, tracks, traj.intrinsics, len(frames),
                         int(b["window"]), int(b["overlap"]), float(b["depth_weight"]))
    if not all(s.converged for s in sols):
        raise StageError("poses", "bundle adjustment did not converge", EXIT_NUMERICAL)
    poses = align_to_first(poses, frames[0].pose)
    save_poses(poses, out / "poses.json")
    plot_trajectory(poses, out / "trajectory.png", reference=[f.pose for f in frames])
    errs = [pose_error(p, f.pose) for p, f in zip(poses, frames)]
    with open(out / "pose_errors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "rotation_error_rad", "translation_error_mm"])
        w.writerows([i, repr(r), repr(t)] for i, (r, t) in enumerate(errs))

    # reconstruction with estimated poses
    r = cfg["reconstruct"]
    cloud = _stage("reconstruct", EXIT_NUMERICAL, fuse, gt, poses, traj.intrinsics,
                   colors=[f.intensity for f in frames], labels=[f.label for f in frames],
                   stride=int(r["stride"]))
    cloud = voxel_downsample(cloud, float(r["voxel"]))
    if len(cloud) == 0:
        raise StageError("reconstruct", "empty point cloud", EXIT_NUMERICAL)
    cloud.save(out / "cloud.ply")

    c = cfg["coverage"]
    hint = poses[-1].translation - poses[0].translation
    raw, clean, _ = _stage("coverage", EXIT_NUMERICAL, assess, cloud, tuple(c["bins"]), int(c["open"]),
                           int(c["close"]), hint)
    write_png8(out / "coverage.png", to_image(clean))
    (out / "coverage.json").write_text(json.dumps(clean.summary(), indent=2, sort_keys=True))
    plot_coverage(clean, out / "coverage_plot.png")

    return {"metrics": {m: report.value(m) for m in ("delta1", "abs_rel", "sq_rel", "rmse_mm")},
            "alignment": {"alpha": params.alpha, "beta": params.beta},
            "n_tracks": len(tracks), "ba_iterations": [s.iterations for s in sols],
            "max_rotation_error_rad": max(e[0] for e in errs),
            "max_translation_error_mm": max(e[1] for e in errs),
            "n_points": len(cloud), "coverage_ratio": clean.summary()["coverage_ratio"],
            "raw_coverage_ratio": raw.summary()["coverage_ratio"]}


def run_pipeline(out_dir, config: dict | None = None, seed: int = 0, threads: int = 1,
                 overwrite: bool = False) -> tuple[RunManifest, dict]:
    """Render, evaluate, estimate poses, fuse and measure coverage.

    Work happens in a sibling temporary directory that replaces ``out_dir``
    only once every stage and the final format check pass, so a failed run
    leaves nothing behind.
    """
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    try:
        cfg = resolve_pipeline_config(config)
    except (ValueError, TypeError) as exc:
        raise StageError("config", str(exc), EXIT_CONFIG) from exc
    if out_dir.exists() and not overwrite:
        raise StageError("config", f"{out_dir} exists (pass overwrite to replace it)", EXIT_CONFIG)
    parent = out_dir.resolve().parent
    if not parent.is_dir():
        raise StageError("config", f"parent directory {parent} does not exist", EXIT_IO)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=parent))
    try:
        summary = _run_stages(cfg, seed, tmp, threads)
        report = validate_formats(tmp)
        if not report.ok:
            bad = [c.path for c in report.checks if not c.ok]
            raise StageError("validate", f"invalid outputs: {bad}", EXIT_VALIDATION)
        outputs = sorted(str(p.relative_to(tmp)) for p in tmp.rglob("*") if p.is_file())
        manifest = RunManifest("pipeline", cfg, seed,
                               outputs=[{"path": p, "sha256": file_sha256(tmp / p)} for p in outputs])
        manifest.wall_clock_s = time.perf_counter() - t0
        manifest.write(tmp / "run_manifest.json")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest, summary
