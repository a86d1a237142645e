"""Reconstructed volumes and their on-disk formats.

A volume is stored as ``values[z, y, x]``; in-plane pixel ``(i, j)`` sits at
``x = (j - (n - 1) / 2) * pixel_size`` and ``y = (i - (n - 1) / 2) * pixel_size``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tifffile

from .errors import DataError, UnreadableFile


def centered_axis(n: int, spacing: float) -> np.ndarray:
    return (np.arange(n) - (n - 1) / 2.0) * spacing


@dataclass
class Volume:
    values: np.ndarray  # (nz, ny, nx)
    pixel_size: float  # mm, in-plane
    row_pitch: float  # mm, between slices
    z_coords: np.ndarray = field(default_factory=lambda: np.empty(0))
    metadata: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def voxel_size(self) -> tuple[float, float, float]:
        return (self.pixel_size, self.pixel_size, self.row_pitch)

    def content_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values, dtype="<f4").tobytes()).hexdigest()


def write_volume(path, vol: Volume, extra: dict | None = None) -> Path:
    """Write ``<path>.raw`` (little-endian float32, x fastest) and ``<path>.json``."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    data = np.ascontiguousarray(vol.values, dtype="<f4")
    raw.write_bytes(data.tobytes())
    nz, ny, nx = data.shape
    sidecar = {
        "dimensions": {"x": nx, "y": ny, "z": nz},
        "dtype": "float32",
        "byte_order": "little",
        "layout": "row-major, x fastest",
        "voxel_size_mm": {"x": vol.pixel_size, "y": vol.pixel_size, "z": vol.row_pitch},
        "z_coords_mm": np.asarray(vol.z_coords, dtype=float).tolist(),
        "sha256": hashlib.sha256(data.tobytes()).hexdigest(),
        **vol.metadata,
        **(extra or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return raw


def read_volume(path) -> Volume:
    path = Path(path)
    try:
        sidecar = json.loads(path.with_suffix(".json").read_text())
        raw = path.with_suffix(".raw").read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"cannot read volume {path}: {exc}") from exc
    dims = sidecar["dimensions"]
    shape = (dims["z"], dims["y"], dims["x"])
    if len(raw) != 4 * int(np.prod(shape)):
        raise DataError(f"{path}: raw size {len(raw)} does not match dimensions {shape}")
    values = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    vs = sidecar["voxel_size_mm"]
    meta = {k: v for k, v in sidecar.items() if k not in {"dimensions", "voxel_size_mm", "z_coords_mm"}}
    return Volume(values, vs["x"], vs["z"], np.asarray(sidecar.get("z_coords_mm", []), dtype=float), meta)


def export_tiff_slices(vol: Volume, out_dir, stem: str = "slice") -> list[Path]:
    """One float32 TIFF per slice, numbered in slice order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(vol.shape[0] - 1)))
    paths = []
    for k, sl in enumerate(vol.values):
        p = out_dir / f"{stem}_{k:0{width}d}.tif"
        tifffile.imwrite(p, np.ascontiguousarray(sl, dtype=np.float32))
        paths.append(p)
    return paths


def read_tiff_slices(paths) -> np.ndarray:
    return np.stack([tifffile.imread(p) for p in paths])


def window_8bit(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Min-max window to uint8 (min -> 0, max -> 255)."""
    v = np.asarray(values, dtype=float)
    lo = float(v.min()) if lo is None else lo
    hi = float(v.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.clip(np.rint((v - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def export_previews(vol: Volume, out_dir, stem: str = "preview") -> list[Path]:
    """8-bit TIFF previews windowed on the global volume min/max."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = float(vol.values.min()), float(vol.values.max())
    width = max(4, len(str(vol.shape[0] - 1)))
    paths = []
    for k, sl in enumerate(vol.values):
        p = out_dir / f"{stem}_{k:0{width}d}.tif"
        tifffile.imwrite(p, window_8bit(sl, lo, hi))
        paths.append(p)
    return paths
