"""Command-line entry point: ``colonpipe <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .bundle_adjust import TrackSet, solve_sequence
from .coverage import assess, to_image
from .depth_eval import DepthSequence, evaluate
from .geometry import CameraIntrinsics, load_poses, save_poses
from .io import FormatError, ensure_dir, list_images, read_depth, read_png, write_png8
from .pipeline import (EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, RunManifest,
                       StageError, load_scene, render_scene, run_pipeline, scene_from_dict)
from .plotting import plot_coverage, plot_metrics, plot_trajectory
from .preprocess import ImageFrame, adain, attenuate, inpaint_masked, local_hist_match, specular_mask
from .reconstruct import PointCloud, fuse, voxel_downsample
from .synthcolon import export_dataset, oracle_tracks
from .validate import validate_formats

log = logging.getLogger("colonpipe")

FORMATS = """\
file formats
  PFM depth (primary)
    Three ASCII header lines, each ended by a single 0x0A byte:
      "Pf" (1 channel) or "PF" (3 channels)
      "<width> <height>" in decimal
      "<scale>" as a decimal float; its sign encodes endianness
      (negative = little-endian, positive = big-endian); |scale| is unused.
    Then width*height*channels IEEE-754 float32 values, rows stored
    bottom-to-top, left-to-right.  Depth is z-depth in mm; 0 marks invalid.
    Files written here always use little-endian ("-1.0").
  PNG16 depth (accepted)
    16-bit grayscale PNG plus sidecar <name>.json {"mm_per_unit": s}; depth
    in mm = value * s.  A missing sidecar is a warning and assumes s = 1.
  Images / masks
    8-bit PNG; label maps use 0 = mucosa, 1 = polyp; masks use 255 = set.
  Tracks (JSON lines)
    one track per line: {"id": int, "obs": [{"f": int, "u": float,
    "v": float, "d": float}, ...]}; (u, v) = (column, row) in pixels,
    d = z-depth in mm, f = frame index.
  Poses (JSON)
    list of camera-to-world poses {"R": [9 floats, row-major], "t": [x, y, z]}.
  Intrinsics (JSON)
    {"fx", "fy", "cx", "cy", "width", "height"}; an optional "per_frame"
    list overrides it frame by frame.
  Point clouds (PLY)
    binary_little_endian 1.0 (ascii optional); vertex properties
    float x y z, uchar red green blue label.
  Coverage
    8-bit PNG with arclength along x and angle along y (255 = seen),
    plus JSON {coverage_ratio, n_s, n_theta, s_min, s_max}.

exit codes
  0 ok, 2 configuration error, 3 I/O error, 4 numerical failure,
  5 validation failure.  Logs go to stderr; stdout only carries the
  --print-json summary.
"""


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}") from None


def _select(directory, kind: str, suffixes) -> list[Path]:
    """Files named ``*_<kind>.<ext>`` if any exist, else every file with a matching suffix."""
    files = list_images(directory, suffixes)
    tagged = [p for p in files if p.stem.endswith("_" + kind)]
    return tagged or files


def _load_intrinsics(path, n: int) -> list[CameraIntrinsics]:
    d = json.loads(Path(path).read_text())
    if "per_frame" in d:
        ks = [CameraIntrinsics.from_dict(x) for x in d["per_frame"]]
        if len(ks) != n:
            raise ValueError(f"{len(ks)} per-frame intrinsics for {n} frames")
        return ks
    return [CameraIntrinsics.from_dict({k: v for k, v in d.items() if k != "per_frame"})] * n


def _load_depths(directory) -> DepthSequence:
    files = _select(directory, "depth", (".pfm", ".png"))
    pfm = [p for p in files if p.suffix.lower() == ".pfm"]
    files = pfm or files
    if not files:
        raise FileNotFoundError(f"no depth files in {directory}")
    return DepthSequence.from_arrays(np.stack([read_depth(p) for p in files]))


def _manifest_path(out: Path) -> Path:
    return out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# -- subcommands -------------------------------------------------------------

def cmd_render(a, m: RunManifest) -> dict:
    if a.scene:
        m.add_input(a.scene)
        scene = load_scene(a.scene, frames=a.frames, size=a.size, seed=a.seed)
    else:
        scene = scene_from_dict({}, frames=a.frames, size=a.size, seed=a.seed)
    m.config["scene"] = scene.to_dict()
    _, traj, frames = render_scene(scene, a.threads)
    out = ensure_dir(a.out)
    written = export_dataset(frames, out, scene.to_dict())
    if a.tracks:
        tracks = oracle_tracks(frames, grid_stride=a.grid_stride, window=16, seed=a.seed)
        tracks.to_jsonl(out / "tracks.jsonl")
        written.append(out / "tracks.jsonl")
    if not a.no_figures:
        plot_trajectory(traj.poses, out / "trajectory.png")
        written.append(out / "trajectory.png")
    m.outputs = [str(p) for p in written]
    return {"n_frames": len(frames), "attenuation": traj.attenuation, "out": str(out)}


def cmd_preprocess(a, m: RunManifest) -> dict:
    src = Path(a.inp)
    files = [p for p in _select(src, "intensity", (".png", ".jpg", ".jpeg", ".tif", ".tiff"))
             if not p.stem.endswith(("_label", "_specmask", "_depth"))]
    if not files:
        raise FileNotFoundError(f"no images in {src}")
    m.add_input(src)
    out = ensure_dir(a.out)
    style = ImageFrame.from_hwc(read_png(a.adain_ref)) if a.adain_ref else None
    n_masked = 0
    for p in files:
        img = ImageFrame.from_hwc(read_png(p))
        if a.specular_mask or a.inpaint:
            mask = specular_mask(img, a.patch, a.sigma_k)
            n_masked += int(mask.sum())
            mpath = out / f"{p.stem}_specmask.png"
            write_png8(mpath, mask)
            m.outputs.append(str(mpath))
            if a.inpaint and mask.any():
                img = inpaint_masked(img, mask)
        if a.attenuate is not None:
            img = attenuate(img, a.attenuate)
        if style is not None:
            img = adain(img, style)
        if a.hist_ref:
            ref = ImageFrame.from_hwc(read_png(Path(a.hist_ref) / p.name))
            img = local_hist_match(img, ref, a.tile)
        dst = out / f"{p.stem}.png"
        write_png8(dst, np.clip(img.to_hwc(), 0.0, 1.0))
        m.outputs.append(str(dst))
    return {"n_images": len(files), "n_specular_pixels": n_masked}


def cmd_eval(a, m: RunManifest) -> dict:
    m.add_input(a.pred)
    m.add_input(a.gt)
    pred, gt = _load_depths(a.pred), _load_depths(a.gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    mask = pred.mask & gt.mask
    params, report = evaluate(DepthSequence(np.where(mask, pred.values, 0.0), mask),
                              DepthSequence(np.where(mask, gt.values, 0.0), mask),
                              a.domain, a.bootstrap, a.seed)
    out = Path(a.out)
    doc = {**report.to_dict(), "alignment": {"alpha": params.alpha, "beta": params.beta,
                                             "domain": params.domain, "degenerate": params.degenerate}}
    out.write_text(json.dumps(doc, indent=2, sort_keys=True))
    m.outputs.append(str(out))
    if not a.no_figures:
        plot_metrics(report, out.with_suffix(".png"))
        m.outputs.append(str(out.with_suffix(".png")))
    return {k: doc[k] for k in ("delta1", "abs_rel", "sq_rel", "rmse_mm", "n_pixels")}


def cmd_poses(a, m: RunManifest) -> dict:
    m.add_input(a.tracks)
    tracks = TrackSet.from_jsonl(a.tracks)
    n = a.n_frames or tracks.max_frame + 1
    ks = _load_intrinsics(a.intrinsics, n)
    poses, sols = solve_sequence(tracks, ks, n, a.window, a.overlap, a.depth_weight)
    if not all(s.converged for s in sols):
        raise StageError("poses", "bundle adjustment did not converge", EXIT_NUMERICAL)
    out = Path(a.out)
    save_poses(poses, out)
    m.outputs.append(str(out))
    if not a.no_figures:
        plot_trajectory(poses, out.with_suffix(".png"))
        m.outputs.append(str(out.with_suffix(".png")))
    return {"n_frames": n, "n_windows": len(sols), "final_costs": [s.final_cost for s in sols]}


def cmd_reconstruct(a, m: RunManifest) -> dict:
    m.add_input(a.depth)
    m.add_input(a.poses)
    depths = _load_depths(a.depth)
    poses = load_poses(a.poses)
    n = len(depths)
    colors = [read_png(p) for p in _select(a.rgb, "intensity", (".png",))] if a.rgb else None
    labels = [read_png(p) for p in _select(a.labels, "label", (".png",))] if a.labels else None
    cloud = fuse(depths, poses, _load_intrinsics(a.intrinsics, n), colors, labels, a.stride)
    if a.voxel > 0:
        cloud = voxel_downsample(cloud, a.voxel)
    cloud.save(a.out, binary=not a.ascii)
    m.outputs.append(str(a.out))
    return {"n_points": len(cloud)}


def cmd_coverage(a, m: RunManifest) -> dict:
    m.add_input(a.cloud)
    cloud = PointCloud.load(a.cloud)
    raw, clean, _ = assess(cloud, a.bins, a.open, a.close)
    write_png8(a.out, to_image(clean))
    m.outputs.append(str(a.out))
    summary = clean.summary()
    if a.summary:
        Path(a.summary).write_text(json.dumps(summary, indent=2, sort_keys=True))
        m.outputs.append(str(a.summary))
    if not a.no_figures:
        fig = Path(a.out).with_name(Path(a.out).stem + "_plot.png")
        plot_coverage(clean, fig)
        m.outputs.append(str(fig))
    return {**summary, "raw_coverage_ratio": raw.summary()["coverage_ratio"]}


def cmd_pipeline(a, m: RunManifest) -> dict:
    cfg = json.loads(Path(a.config).read_text()) if a.config else {}
    if a.scene:
        cfg["scene"] = json.loads(Path(a.scene).read_text())
    if a.frames is not None:
        cfg["frames"] = a.frames
    if a.size is not None:
        cfg["size"] = list(a.size)
    manifest, summary = run_pipeline(a.out, cfg, a.seed, a.threads, a.overwrite)
    m.config = manifest.config
    m.outputs = [o["path"] for o in manifest.outputs]
    return summary


def cmd_validate(a, m: RunManifest) -> dict:
    report = validate_formats(a.dir)
    for c in report.checks:
        status = "PASS" if c.ok else "FAIL"
        log.info("%s %s %s %s", status, c.kind, c.path, c.message)
        for w in c.warnings:
            log.warning("%s: %s", c.path, w)
    if not report.ok:
        raise StageError("validate", f"{report.n_failed} file(s) failed", EXIT_VALIDATION)
    return report.to_dict()


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="single source of randomness (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker cap for library calls")
    common.add_argument("--print-json", action="store_true", help="print a JSON summary on stdout")
    common.add_argument("--no-figures", action="store_true", help="skip matplotlib report figures")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")

    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="colonpipe", description="Synthetic colonoscopy depth, pose, "
                                "reconstruction and coverage toolkit.", epilog=FORMATS, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_, epilog=FORMATS,
                            formatter_class=fmt)
        sp.set_defaults(func=fn)
        return sp

    sp = add("render", cmd_render, "render a phantom fly-through to PNG/PFM files")
    sp.add_argument("--scene", help="scene JSON {phantom, trajectory, lighting}; default demo scene")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--size", type=_pair, help="WxH")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tracks", action="store_true", help="also write oracle tracks.jsonl")
    sp.add_argument("--grid-stride", type=int, default=16)

    sp = add("preprocess", cmd_preprocess, "specular masking, inpainting and intensity matching")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--specular-mask", action="store_true")
    sp.add_argument("--inpaint", action="store_true", help="inpaint specular pixels (implies masking)")
    sp.add_argument("--patch", type=int, default=16)
    sp.add_argument("--sigma-k", type=float, default=3.0)
    sp.add_argument("--adain-ref", help="style image for channel statistics matching")
    sp.add_argument("--hist-ref", help="directory of same-named reference images")
    sp.add_argument("--tile", type=int, default=64)
    sp.add_argument("--attenuate", type=float)

    sp = add("eval", cmd_eval, "align predictions to ground truth and score them")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--domain", choices=("depth", "disparity"), default="depth")
    sp.add_argument("--bootstrap", type=int, default=1000, help="resamples (0 disables CIs)")
    sp.add_argument("--out", required=True)

    sp = add("poses", cmd_poses, "windowed bundle adjustment from feature tracks")
    sp.add_argument("--tracks", required=True)
    sp.add_argument("--intrinsics", required=True)
    sp.add_argument("--n-frames", type=int)
    sp.add_argument("--window", type=int, default=16)
    sp.add_argument("--overlap", type=int, default=4)
    sp.add_argument("--depth-weight", type=float, default=1.0)
    sp.add_argument("--out", required=True)

    sp = add("reconstruct", cmd_reconstruct, "fuse posed depth maps into a PLY point cloud")
    sp.add_argument("--depth", required=True)
    sp.add_argument("--poses", required=True)
    sp.add_argument("--intrinsics", required=True)
    sp.add_argument("--rgb")
    sp.add_argument("--labels")
    sp.add_argument("--voxel", type=float, default=1.0, help="voxel size in mm (0 disables)")
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--ascii", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("coverage", cmd_coverage, "unroll a cloud and report surface coverage")
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--bins", type=_pair, default=(256, 64), help="N_s x N_theta")
    sp.add_argument("--open", type=int, default=1)
    sp.add_argument("--close", type=int, default=2)
    sp.add_argument("--out", required=True)
    sp.add_argument("--summary")

    sp = add("pipeline", cmd_pipeline, "render, evaluate, pose, reconstruct and cover in one run")
    sp.add_argument("--config", help="pipeline JSON (frames, size, eval, ba, reconstruct, coverage, scene)")
    sp.add_argument("--scene")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--size", type=_pair)
    sp.add_argument("--out", required=True)
    sp.add_argument("--overwrite", action="store_true")

    sp = add("validate", cmd_validate, "check PFM/PNG/JSONL/PLY/JSON files in a directory")
    sp.add_argument("dir")
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exc.code
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ArithmeticError, np.linalg.LinAlgError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (ValueError, TypeError, KeyError)):
        return EXIT_CONFIG
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    level = logging.WARNING if a.quiet else (logging.DEBUG if a.verbose > 1 else logging.INFO)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    Image.MAX_IMAGE_PIXELS = None
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(a).items()
           if k not in ("func", "verbose", "quiet", "print_json")}
    m = RunManifest(a.command, cfg, a.seed)
    t0 = time.perf_counter()
    try:
        summary = a.func(a, m)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        code = _exit_code(exc)
        log.error("%s failed (exit %d): %s", a.command, code, exc)
        if code == 1:
            log.exception("unexpected error")
        return code
    m.wall_clock_s = time.perf_counter() - t0
    if a.command not in ("validate", "pipeline"):
        m.write(_manifest_path(Path(a.out)))
    if a.print_json:
        sys.stdout.write(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
