"""Raw Bayer frames to an angle-ordered green-channel projection stack."""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DataError,
    DimensionMismatch,
    DuplicateAngle,
    NonuniformSpacing,
    OddDimensions,
    SampleOutOfRange,
    UnreadableFile,
)
from .geometry_calib import EffectiveGeometry

log = logging.getLogger(__name__)

PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
SPACING_TOL_DEG = 1e-6


@dataclass
class BayerMosaic:
    samples: np.ndarray  # (height, width) integer codes
    pattern: str = "RGGB"
    bit_depth: int = 16
    angle_deg: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.pattern not in PATTERNS:
            raise DataError(f"unknown Bayer pattern {self.pattern!r}; expected one of {PATTERNS}")
        if not 10 <= self.bit_depth <= 16:
            raise DataError(f"bit depth must be in 10..16, got {self.bit_depth}")
        h, w = self.samples.shape
        if h % 2 or w % 2:
            raise OddDimensions(f"Bayer mosaic dimensions must be even, got {w}x{h}")
        if self.samples.size and (self.samples.min() < 0 or self.samples.max() >= 2**self.bit_depth):
            raise SampleOutOfRange(f"samples exceed the {self.bit_depth}-bit range")

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    def green_mask(self) -> np.ndarray:
        rows, cols = np.indices(self.samples.shape)
        parity = 1 if self.pattern in ("RGGB", "BGGR") else 0
        return (rows + cols) % 2 == parity


@dataclass
class GreenImage:
    samples: np.ndarray  # (height, width), raw code units
    angle_deg: float = 0.0
    bit_depth: int = 16

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class CropRegion:
    u0: int
    v0: int
    width: int
    height: int

    def __post_init__(self):
        if min(self.u0, self.v0) < 0 or min(self.width, self.height) < 1:
            raise DataError(f"invalid crop region {self}")

    def check_fits(self, width: int, height: int) -> None:
        if self.u0 + self.width > width or self.v0 + self.height > height:
            raise DimensionMismatch(f"crop {self} does not fit inside a {width}x{height} frame")

    def slices(self) -> tuple[slice, slice]:
        return slice(self.v0, self.v0 + self.height), slice(self.u0, self.u0 + self.width)

    @classmethod
    def full(cls, width: int, height: int) -> "CropRegion":
        return cls(0, 0, width, height)


@dataclass
class ProjectionStack:
    """Intensity projections, ``values[v, u, k]`` normalized to detector full scale."""

    values: np.ndarray
    angles_deg: np.ndarray
    crop: CropRegion
    geometry: Optional[EffectiveGeometry] = None
    bit_depth: int = 16
    metadata: dict = field(default_factory=dict)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def n_angles(self) -> int:
        return self.values.shape[2]

    @property
    def epsilon_floor(self) -> float:
        return 2.0 ** (-self.bit_depth)

    @property
    def window_geometry(self) -> Optional[EffectiveGeometry]:
        """Geometry with the principal point expressed in cropped coordinates."""
        if self.geometry is None:
            return None
        return self.geometry.shifted(self.crop.u0, self.crop.v0)


# ---------------------------------------------------------------------------
# PGM codec (binary P5, 8 or 16 bit)

_PGM_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return ``(samples, maxval)`` from a binary PGM file."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    m = _PGM_HEADER.match(data)
    if m is None:
        raise UnreadableFile(f"{path} is not a binary (P5) PGM file")
    width, height, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise UnreadableFile(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    payload = data[m.end():]
    expected = width * height * dtype.itemsize
    if len(payload) < expected:
        raise UnreadableFile(f"{path}: truncated pixel data ({len(payload)} of {expected} bytes)")
    arr = np.frombuffer(payload[:expected], dtype=dtype).reshape(height, width)
    return arr.astype(np.uint16), maxval


def write_pgm(path, samples: np.ndarray, maxval: int = 65535) -> None:
    arr = np.asarray(samples)
    if arr.ndim != 2:
        raise DataError("PGM frames must be 2-D")
    if arr.min() < 0 or arr.max() > maxval:
        raise SampleOutOfRange(f"samples outside 0..{maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# operations


def load_bayer(path, pattern: str = "RGGB", bit_depth: int = 16, angle_deg: float = 0.0) -> BayerMosaic:
    samples, _ = read_pgm(path)
    return BayerMosaic(samples, pattern=pattern, bit_depth=bit_depth, angle_deg=float(angle_deg))


_CROSS = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)


def demosaic_green(m: BayerMosaic) -> GreenImage:
    """Bilinear green plane.

    Green photosites keep their value; red and blue photosites get the mean
    of their in-bounds 4-connected (green) neighbours.
    """
    gmask = m.green_mask()
    g = np.where(gmask, m.samples.astype(float), 0.0)
    total = ndimage.convolve(g, _CROSS, mode="constant", cval=0.0)
    count = ndimage.convolve(gmask.astype(float), _CROSS, mode="constant", cval=0.0)
    out = np.where(gmask, g, total / np.maximum(count, 1.0))
    return GreenImage(out, angle_deg=m.angle_deg, bit_depth=m.bit_depth)


def assemble_stack(
    frames: Sequence[GreenImage],
    crop: Optional[CropRegion] = None,
    geometry: Optional[EffectiveGeometry] = None,
) -> ProjectionStack:
    """Sort frames by angle, crop them and pack a normalized intensity stack."""
    frames = list(frames)
    if len(frames) < 2:
        raise DataError(f"a projection stack needs at least 2 frames, got {len(frames)}")
    shape = frames[0].samples.shape
    bit_depth = frames[0].bit_depth
    for fr in frames:
        if fr.samples.shape != shape:
            raise DimensionMismatch(f"frame at {fr.angle_deg} deg has shape {fr.samples.shape}, expected {shape}")
        if fr.bit_depth != bit_depth:
            raise DimensionMismatch("frames have mixed bit depths")
    if crop is None:
        crop = CropRegion.full(shape[1], shape[0])
    crop.check_fits(shape[1], shape[0])

    order = sorted(range(len(frames)), key=lambda i: frames[i].angle_deg)
    angles = np.array([frames[i].angle_deg for i in order], dtype=float)
    steps = np.diff(angles)
    if np.any(steps <= 0):
        dup = angles[1:][steps <= 0][0]
        raise DuplicateAngle(f"two frames share the angle {dup} deg")
    if np.ptp(steps) > SPACING_TOL_DEG:
        raise NonuniformSpacing(f"angular steps range from {steps.min()} to {steps.max()} deg")

    rs, cs = crop.slices()
    full_scale = 2.0**bit_depth - 1.0
    values = np.stack([frames[i].samples[rs, cs] for i in order], axis=-1) / full_scale
    return ProjectionStack(values, angles, crop, geometry=geometry, bit_depth=bit_depth)


# ---------------------------------------------------------------------------
# dataset directories: frames + manifest.csv + capture.json


def read_manifest(dataset_dir) -> list[tuple[str, float]]:
    path = Path(dataset_dir) / "manifest.csv"
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or {"filename", "angle_deg"} - set(reader.fieldnames):
                raise DataError(f"{path}: header must contain filename,angle_deg")
            return [(row["filename"], float(row["angle_deg"])) for row in reader]
    except OSError as exc:
        raise UnreadableFile(f"cannot read manifest {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def read_capture_metadata(dataset_dir) -> dict:
    path = Path(dataset_dir) / "capture.json"
    try:
        meta = json.loads(path.read_text())
    except OSError as exc:
        raise UnreadableFile(f"cannot read capture metadata {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc
    meta.setdefault("pattern", "RGGB")
    meta.setdefault("bit_depth", 16)
    return meta


def load_frame(dataset_dir, filename: str, angle_deg: float, pattern: str, bit_depth: int) -> GreenImage:
    return demosaic_green(load_bayer(Path(dataset_dir) / filename, pattern, bit_depth, angle_deg))
