"""Format checks for a directory of pipeline artifacts (report only, never raises)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from PIL import Image

from .io import FormatError, png16_sidecar, read_pfm, read_ply, read_tracks_jsonl


@dataclass
class FileCheck:
    path: str
    kind: str
    ok: bool
    message: str = ""
    offset: int | None = None
    warnings: list = field(default_factory=list)


@dataclass
class ValidationReport:
    checks: list

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def n_failed(self) -> int:
        return sum(not c.ok for c in self.checks)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "n_files": len(self.checks), "n_failed": self.n_failed,
                "files": [asdict(c) for c in self.checks]}


def _check_png(p: Path) -> FileCheck:
    with Image.open(p) as im:
        im.load()
        mode = im.mode
    c = FileCheck(str(p), "png", True, mode)
    if mode in ("I;16", "I;16B", "I;16L", "I") and not png16_sidecar(p).exists():
        c.kind = "png16"
        c.warnings.append("16-bit PNG without mm_per_unit sidecar; 1 mm per unit will be assumed")
    elif mode.startswith("I"):
        c.kind = "png16"
    return c


def _check_json(p: Path) -> FileCheck:
    json.loads(p.read_text())
    return FileCheck(str(p), "json", True)


def _check_file(p: Path) -> FileCheck | None:
    suffix = p.suffix.lower()
    kinds = {".pfm": "pfm", ".png": "png", ".ply": "ply", ".jsonl": "jsonl", ".json": "json"}
    if suffix not in kinds:
        return None
    try:
        if suffix == ".pfm":
            a = read_pfm(p)
            return FileCheck(str(p), "pfm", True, f"{a.shape[1]}x{a.shape[0]}")
        if suffix == ".png":
            return _check_png(p)
        if suffix == ".ply":
            d = read_ply(p)
            return FileCheck(str(p), "ply", True, f"{len(d['xyz'])} vertices")
        if suffix == ".jsonl":
            return FileCheck(str(p), "jsonl", True, f"{len(read_tracks_jsonl(p))} tracks")
        return _check_json(p)
    except FormatError as exc:
        return FileCheck(str(p), kinds[suffix], False, str(exc), exc.offset)
    except (OSError, ValueError) as exc:
        return FileCheck(str(p), kinds[suffix], False, str(exc))


def validate_formats(directory) -> ValidationReport:
    """Check every recognised file under ``directory`` (recursively)."""
    d = Path(directory)
    if not d.is_dir():
        return ValidationReport([FileCheck(str(d), "dir", False, "not a readable directory")])
    checks = [c for p in sorted(d.rglob("*")) if p.is_file() and (c := _check_file(p)) is not None]
    return ValidationReport(checks)
