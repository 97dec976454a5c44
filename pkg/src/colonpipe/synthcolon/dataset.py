"""Writing and reading rendered sequences on disk."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import __version__
from ..geometry import CameraIntrinsics, Pose
from ..io import ensure_dir, read_pfm, read_png, write_pfm, write_png8
from .render import RenderedFrame

MANIFEST = "manifest.json"
POSES = "poses.json"
INTRINSICS = "intrinsics.json"


def frame_names(i: int) -> dict[str, str]:
    return {"intensity": f"frame_{i:05d}_intensity.png",
            "depth": f"frame_{i:05d}_depth.pfm",
            "label": f"frame_{i:05d}_label.png"}


def export_dataset(frames, out_dir, config: dict | None = None) -> list[Path]:
    """Write intensity PNG, depth PFM and label PNG per frame plus JSON metadata.

    Output is byte-identical for identical inputs; the manifest carries no
    timestamps.
    """
    out = ensure_dir(out_dir)
    written = []
    entries = []
    for i, fr in enumerate(frames):
        names = frame_names(i)
        try:
            write_png8(out / names["intensity"], fr.intensity)
            write_pfm(out / names["depth"], np.where(fr.mask, fr.depth, 0.0))
            write_png8(out / names["label"], fr.label.astype(np.uint8))
        except OSError as exc:
            raise OSError(f"failed writing frame {i} to {out}: {exc}") from exc
        written += [out / n for n in names.values()]
        entries.append(names)
    ks = [fr.intrinsics for fr in frames]
    k_doc = ks[0].to_dict()
    if any(k != ks[0] for k in ks):
        k_doc = {**k_doc, "per_frame": [k.to_dict() for k in ks]}
    (out / POSES).write_text(json.dumps([fr.pose.to_dict() for fr in frames], indent=1))
    (out / INTRINSICS).write_text(json.dumps(k_doc, indent=2))
    manifest = {"tool_version": __version__, "n_frames": len(frames), "frames": entries,
                "depth_units": "mm", "depth_convention": "z", "config": config or {}}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    written += [out / POSES, out / INTRINSICS, out / MANIFEST]
    return written


def load_dataset(directory) -> list[RenderedFrame]:
    d = Path(directory)
    manifest = json.loads((d / MANIFEST).read_text())
    poses = [Pose.from_dict(p) for p in json.loads((d / POSES).read_text())]
    kd = json.loads((d / INTRINSICS).read_text())
    if "per_frame" in kd:
        ks = [CameraIntrinsics.from_dict(x) for x in kd["per_frame"]]
    else:
        ks = [CameraIntrinsics.from_dict(kd)] * len(poses)
    frames = []
    for i, names in enumerate(manifest["frames"]):
        depth = read_pfm(d / names["depth"]).astype(np.float64)
        mask = depth > 0
        intensity = read_png(d / names["intensity"]).astype(np.float64) / 255.0
        label = read_png(d / names["label"]).astype(np.uint8)
        frames.append(RenderedFrame(intensity, depth, mask, label, poses[i], ks[i],
                                    intensity.copy()))
    return frames
