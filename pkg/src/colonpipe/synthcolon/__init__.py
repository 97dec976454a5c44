"""Procedural colon phantom, fly-through sampling, rendering and oracle tracks."""

from .dataset import export_dataset, load_dataset
from .phantom import MUCOSA, POLYP, Phantom, PhantomError, PhantomSpec, Polyp, build_phantom, default_phantom
from .render import Lighting, RenderedFrame, render, render_sequence, trace
from .tracks import oracle_tracks
from .trajectory import Trajectory, TrajectoryError, TrajectorySpec, base_intrinsics, sample_trajectory

__all__ = [
    "MUCOSA", "POLYP", "Lighting", "Phantom", "PhantomError", "PhantomSpec", "Polyp", "RenderedFrame",
    "Trajectory", "TrajectoryError", "TrajectorySpec", "base_intrinsics", "build_phantom",
    "default_phantom", "export_dataset", "load_dataset", "oracle_tracks", "render", "render_sequence",
    "sample_trajectory", "trace",
]
