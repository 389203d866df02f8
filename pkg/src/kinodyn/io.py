"""On-disk artifact formats.

Grids (terrain and costmaps) are a JSON header plus a sibling little-endian
binary blob; the header records the blob's sha256 so consumers can refuse
mismatched inputs.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .terrain import ElevationGrid
from .track import Costmap2D


class ManifestMismatch(RuntimeError):
    pass


def sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _blob_path(header_path: Path) -> Path:
    return header_path.with_suffix(".bin")


def _write_grid(path, header: dict, data: np.ndarray):
    path = Path(path)
    blob = data.tobytes(order="C")
    header = dict(header, data=_blob_path(path).name, sha256=sha256_bytes(blob))
    _blob_path(path).write_bytes(blob)
    path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return header


def _read_grid(path, dtype):
    path = Path(path)
    header = json.loads(path.read_text())
    blob = (path.parent / header["data"]).read_bytes()
    if sha256_bytes(blob) != header["sha256"]:
        raise ManifestMismatch(f"{path}: binary blob does not match its header hash")
    arr = np.frombuffer(blob, dtype=dtype).reshape(header["height"], header["width"])
    return header, arr


def save_terrain(path, grid: ElevationGrid) -> dict:
    hdr = {"kind": "heightmap", "origin": list(grid.origin), "resolution": grid.resolution,
           "width": grid.width, "height": grid.height, "recipe": grid.recipe,
           "seed": grid.seed, "dtype": "<f4"}
    return _write_grid(path, hdr, grid.heights.astype("<f4"))


def load_terrain(path) -> ElevationGrid:
    hdr, arr = _read_grid(path, "<f4")
    return ElevationGrid(tuple(hdr["origin"]), hdr["resolution"], arr.astype(np.float64),
                         hdr.get("recipe", {}), hdr.get("seed", 0))


def save_costmap(path, cmap: Costmap2D, terrain_hash: str | None = None) -> dict:
    ny, nx = cmap.cells.shape
    hdr = {"kind": "costmap", "origin": list(cmap.origin), "resolution": cmap.resolution,
           "width": nx, "height": ny, "dtype": "<u1", "terrain_sha256": terrain_hash}
    return _write_grid(path, hdr, cmap.cells.astype("<u1"))


def load_costmap(path) -> Costmap2D:
    hdr, arr = _read_grid(path, "<u1")
    return Costmap2D(tuple(hdr["origin"]), hdr["resolution"], arr.copy())


def artifact_hash(path) -> str:
    """Hash recorded for an artifact: the blob hash for grids, file hash otherwise."""
    path = Path(path)
    if path.suffix == ".json":
        try:
            hdr = json.loads(path.read_text())
            if "sha256" in hdr and "data" in hdr:
                return hdr["sha256"]
        except (json.JSONDecodeError, UnicodeDecodeError):
            pass
    return sha256_file(path)


class JsonlWriter:
    """Append-only JSON-lines log; every record is flushed so a crash leaves a parseable prefix."""

    def __init__(self, path, header: dict | None = None, mode: str = "w"):
        self.path = Path(path)
        self._f = open(self.path, mode, encoding="utf-8")
        if header is not None:
            self.write(header)

    def write(self, record: dict):
        self._f.write(json.dumps(record, separators=(",", ":"), sort_keys=True) + "\n")
        self._f.flush()

    def close(self):
        if not self._f.closed:
            self._f.flush()
            os.fsync(self._f.fileno())
            self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path):
    """Parse a JSON-lines file, tolerating a truncated final line."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                break
    return out
