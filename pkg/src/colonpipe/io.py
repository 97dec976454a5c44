"""Readers and writers for the on-disk formats.

PFM
    ``Pf\\n<width> <height>\\n<scale>\\n`` followed by float32 rows stored
    bottom-to-top.  A negative scale means little-endian data.  Invalid
    depth is written as 0.
PNG16
    16-bit grayscale PNG plus a ``<name>.json`` sidecar ``{"mm_per_unit": s}``.
PLY
    ``x y z`` float32, ``red green blue label`` uchar; binary little-endian
    by default, ASCII optional.
Tracks
    JSON lines, one track per line:
    ``{"id": int, "obs": [{"f": int, "u": float, "v": float, "d": float}, ...]}``.
"""

from __future__ import annotations

import json
import logging
import os
import re
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


class FormatError(ValueError):
    """A file does not conform to its declared format."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        self.path = None if path is None else str(path)
        self.offset = offset
        where = f"{path}: " if path is not None else ""
        at = f" (byte offset {offset})" if offset is not None else ""
        super().__init__(f"{where}{message}{at}")


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, data: np.ndarray, scale: float = 1.0) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM data must be HxW or HxWx3")
    h, w = data.shape[:2]
    body = np.flipud(data).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(f"{-abs(scale)}\n".encode())
        fh.write(body)


def _read_pfm_header(raw: bytes, path):
    lines = []
    pos = 0
    for _ in range(3):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError("truncated PFM header", path, len(raw))
        lines.append(raw[pos:end].strip())
        pos = end + 1
    kind = lines[0]
    if kind not in (b"Pf", b"PF"):
        raise FormatError(f"bad PFM magic {kind!r}", path, 0)
    m = re.fullmatch(rb"(\d+)\s+(\d+)", lines[1])
    if not m:
        raise FormatError("bad PFM dimensions line", path, len(lines[0]) + 1)
    w, h = int(m.group(1)), int(m.group(2))
    try:
        scale = float(lines[2])
    except ValueError:
        raise FormatError("bad PFM scale line", path, pos) from None
    if scale == 0:
        raise FormatError("PFM scale must be nonzero", path, pos)
    return kind, w, h, scale, pos


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    kind, w, h, scale, offset = _read_pfm_header(raw, path)
    channels = 3 if kind == b"PF" else 1
    need = w * h * channels * 4
    have = len(raw) - offset
    if have < need:
        raise FormatError(f"truncated PFM data: expected {need} bytes, found {have}",
                          path, len(raw))
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype, count=w * h * channels, offset=offset)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


# -- 8/16-bit PNG ------------------------------------------------------------

def write_png8(path, img: np.ndarray) -> None:
    """Write a float image in [0, 1] (or a bool/uint8 array) as 8-bit PNG."""
    a = np.asarray(img)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    elif a.dtype != np.uint8:
        a = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    if a.ndim == 3 and a.shape[0] in (1, 3) and a.shape[2] not in (1, 3):
        a = np.moveaxis(a, 0, -1)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    Image.fromarray(a).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def write_png16(path, depth_mm: np.ndarray, mm_per_unit: float) -> None:
    units = np.round(np.nan_to_num(np.asarray(depth_mm, float), nan=0.0) / mm_per_unit)
    units = np.clip(units, 0, 65535).astype(np.uint16)
    Image.fromarray(units).save(path, format="PNG")
    with open(png16_sidecar(path), "w") as fh:
        json.dump({"mm_per_unit": float(mm_per_unit)}, fh)


def png16_sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def read_png16(path, mm_per_unit: float | None = None) -> np.ndarray:
    with Image.open(path) as im:
        a = np.array(im)
    if a.dtype not in (np.uint16, np.int32, np.uint8):
        raise FormatError(f"unexpected PNG pixel type {a.dtype}", path)
    if mm_per_unit is None:
        side = png16_sidecar(path)
        if side.exists():
            mm_per_unit = float(json.loads(side.read_text())["mm_per_unit"])
        else:
            log.warning("%s: no sidecar, assuming 1 mm per unit", path)
            mm_per_unit = 1.0
    return a.astype(np.float64) * mm_per_unit


def read_depth(path) -> np.ndarray:
    """Load a depth map (mm) from PFM or 16-bit PNG."""
    p = Path(path)
    if p.suffix.lower() == ".pfm":
        return read_pfm(p).astype(np.float64)
    if p.suffix.lower() == ".png":
        return read_png16(p)
    raise FormatError("unsupported depth file type", path)


def list_depth_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".pfm", ".png"))
    pfm = [p for p in files if p.suffix.lower() == ".pfm"]
    return pfm if pfm else files


def list_images(directory, suffixes=(".png", ".jpg", ".jpeg", ".tif", ".tiff")) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in suffixes)


# -- PLY ---------------------------------------------------------------------

_PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                       ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("label", "u1")])


def write_ply(path, xyz: np.ndarray, rgb: np.ndarray | None = None,
              label: np.ndarray | None = None, binary: bool = True) -> None:
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    n = len(xyz)
    rec = np.zeros(n, dtype=_PLY_DTYPE)
    rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    if rgb is not None:
        rgb = np.asarray(rgb).reshape(-1, 3)
        rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    if label is not None:
        rec["label"] = np.asarray(label).reshape(-1)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property uchar label\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for r in rec:
                fh.write(("%.9g %.9g %.9g %d %d %d %d\n" % tuple(r.tolist())).encode("ascii"))


def _parse_ply_header(raw: bytes, path):
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError("missing PLY header", path, 0)
    header = raw[:end].decode("ascii", "replace").splitlines()
    body = end + len(b"end_header\n")
    fmt, n, props, in_vertex = None, None, [], False
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append((parts[-1], parts[1]))
    if fmt not in ("ascii", "binary_little_endian") or n is None:
        raise FormatError("unsupported PLY format", path, 0)
    return fmt, n, props, body


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int": "<i4", "int32": "<i4",
              "uint": "<u4", "short": "<i2", "ushort": "<u2"}


def read_ply(path) -> dict[str, np.ndarray]:
    """Return ``{"xyz": (N,3), "rgb": (N,3) uint8 or None, "label": (N,) or None}``."""
    raw = Path(path).read_bytes()
    fmt, n, props, body = _parse_ply_header(raw, path)
    try:
        dtype = np.dtype([(name, _PLY_TYPES[t]) for name, t in props])
    except KeyError as exc:
        raise FormatError(f"unsupported PLY property type {exc}", path) from None
    if fmt == "binary_little_endian":
        need = n * dtype.itemsize
        if len(raw) - body < need:
            raise FormatError(f"truncated PLY body: expected {need} bytes", path, len(raw))
        rec = np.frombuffer(raw, dtype=dtype, count=n, offset=body)
    else:
        rows = raw[body:].decode("ascii").split("\n")
        rows = [r for r in rows if r.strip()]
        if len(rows) < n:
            raise FormatError(f"truncated PLY body: {len(rows)} of {n} rows", path, len(raw))
        table = np.array([r.split() for r in rows[:n]], dtype=float).reshape(n, len(props))
        rec = np.zeros(n, dtype=dtype)
        for i, (name, _) in enumerate(props):
            rec[name] = table[:, i]
    names = dtype.names
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    rgb = (np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.uint8)
           if {"red", "green", "blue"} <= set(names) else None)
    label = rec["label"].astype(np.uint8) if "label" in names else None
    return {"xyz": xyz, "rgb": rgb, "label": label}


# -- tracks ------------------------------------------------------------------

def write_tracks_jsonl(path, tracks) -> None:
    """``tracks``: iterable of objects with ``track_id`` and ``observations``."""
    with open(path, "w") as fh:
        for t in tracks:
            obs = [{"f": int(o.frame), "u": float(o.u), "v": float(o.v), "d": float(o.depth)}
                   for o in t.observations]
            fh.write(json.dumps({"id": int(t.track_id), "obs": obs}) + "\n")


def read_tracks_jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append({"id": int(rec["id"]),
                            "obs": [(int(o["f"]), float(o["u"]), float(o["v"]), float(o["d"]))
                                    for o in rec["obs"]]})
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"line {lineno}: {exc}", path) from None
    return out


def file_sha256(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
