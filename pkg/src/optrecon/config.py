"""TOML pipeline configuration, resolved and validated before any compute."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import tomli

from .attenuation import AirMarginSpec
from .errors import ConfigError, OptReconError
from .geometry_calib import (
    CameraIntrinsics,
    EffectiveGeometry,
    MagnificationEstimate,
    derive_effective_geometry,
)
from .raw_ingest import CropRegion
from .synth_phantom import DigitalPhantom, SimulationConfig, load_phantom, phantom_from_dict, sinusoidal_vignetting
from .tomo_recon import ReconConfig


@dataclass
class PipelineConfig:
    raw: dict
    base_dir: Path
    input_dir: Optional[Path]
    output_dir: Optional[Path]
    crop: Optional[CropRegion]
    air: AirMarginSpec
    geometry: Optional[EffectiveGeometry]
    recon: ReconConfig
    seed: int = 0
    threads: int = 1
    write_tiff: bool = False
    simulation: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def snapshot(self) -> dict:
        """Fully resolved configuration for the run manifest."""
        return {
            "paths": {"input": str(self.input_dir), "output": str(self.output_dir)},
            "crop": None if self.crop is None else vars(self.crop).copy(),
            "air": vars(self.air).copy(),
            "geometry": None if self.geometry is None else self.geometry.to_dict(),
            "recon": {"n": self.recon.n, "pixel_size": self.recon.pixel_size, "filter": self.recon.filter, "circle": self.recon.circle},
            "seed": self.seed,
            "simulation": _jsonable(self.simulation),
            "output": {"tiff_slices": self.write_tiff},
        }


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=str)) if obj is not None else None


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key=value`` with ``value`` parsed as a TOML value (bare words become strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, value = text.split("=", 1)
    try:
        parsed = tomli.loads(f"v = {value}")["v"]
    except tomli.TOMLDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for text in overrides or ():
        keys, value = parse_override(text)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-table key")
        node[keys[-1]] = value
    return raw


def _path(base: Path, value) -> Path:
    p = Path(os.path.expanduser(str(value)))
    return (p if p.is_absolute() else base / p).resolve()


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _geometry(section: dict, base: Path) -> Optional[EffectiveGeometry]:
    if not section:
        return None
    if "file" in section:
        data = _read_json(_path(base, section["file"]))
        data = data.get("effective_geometry", data)
        try:
            return EffectiveGeometry.from_dict(data)
        except KeyError as exc:
            raise ConfigError(f"geometry file lacks {exc}") from exc
    if "f_eff" in section:
        try:
            return EffectiveGeometry(
                f_eff=float(section["f_eff"]),
                pixel_pitch=float(section.get("pixel_pitch", 1.0)),
                principal_point=tuple(section["principal_point"]),
                axis_distance=float(section["axis_distance"]),
            )
        except KeyError as exc:
            raise ConfigError(f"[geometry] needs {exc}") from exc
    if "calibration" in section:
        calib = _read_json(_path(base, section["calibration"]))
        k = CameraIntrinsics.from_matrix(np.asarray(calib["K"], dtype=float))
        mag = section.get("magnification", 1.0)
        if isinstance(mag, str):
            mag = _read_json(_path(base, mag))["M"]
        for key in ("f_bare", "axis_distance"):
            if key not in section:
                raise ConfigError(f"[geometry] with a calibration file needs {key}")
        if not float(section["axis_distance"]) > 0:
            raise ConfigError(f"axis_distance must be positive, got {section['axis_distance']}")
        return derive_effective_geometry(
            k, MagnificationEstimate(float(mag), float("nan"), float("nan")), float(section["f_bare"]), float(section["axis_distance"])
        )
    raise ConfigError("[geometry] needs one of: file, f_eff/principal_point/axis_distance, calibration")


def load_config(path, overrides=None, require_input: bool = True) -> PipelineConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return resolve_config(apply_overrides(raw, overrides), path.parent.resolve(), require_input)


def resolve_config(raw: dict, base_dir: Path, require_input: bool = True) -> PipelineConfig:
    try:
        paths = raw.get("paths", {})
        input_dir = _path(base_dir, paths["input"]) if "input" in paths else None
        output_dir = _path(base_dir, paths["output"]) if "output" in paths else None
        if require_input:
            if input_dir is None:
                raise ConfigError("[paths] input is required")
            for name in ("manifest.csv", "capture.json"):
                if not (input_dir / name).is_file():
                    raise ConfigError(f"input dataset {input_dir} has no {name}")
        crop = CropRegion(**raw["crop"]) if "crop" in raw else None
        air = AirMarginSpec(**raw.get("air", {}))
        geometry = _geometry(raw.get("geometry", {}), base_dir)
        recon = ReconConfig(**raw.get("recon", {}))
        seed = int(raw.get("seed", 0))
        threads = int(raw.get("threads", os.cpu_count() or 1))
        if threads < 1:
            raise ConfigError(f"threads must be >= 1, got {threads}")
        sim = raw.get("simulation")
        if sim is not None:
            simulation_from_config(sim, geometry, base_dir, seed)
    except OptReconError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    except TypeError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return PipelineConfig(
        raw=raw,
        base_dir=base_dir,
        input_dir=input_dir,
        output_dir=output_dir,
        crop=crop,
        air=air,
        geometry=geometry,
        recon=recon,
        seed=seed,
        threads=threads,
        write_tiff=bool(raw.get("output", {}).get("tiff_slices", False)),
        simulation=sim,
    )


def simulation_from_config(
    sim: dict, geometry: Optional[EffectiveGeometry], base_dir: Path, seed: int
) -> tuple[DigitalPhantom, SimulationConfig]:
    if geometry is None:
        raise ConfigError("simulation needs an explicit [geometry]")
    if "phantom" in sim:
        phantom = load_phantom(_path(base_dir, sim["phantom"]))
    else:
        phantom = phantom_from_dict(sim)
    known = {
        "phantom", "primitive", "rows", "cols", "n_views", "start_deg", "i0", "vignetting_amplitude",
        "noise_counts", "mode", "bit_depth", "pattern",
    }
    unknown = set(sim) - known
    if unknown:
        raise ConfigError(f"unknown [simulation] keys {sorted(unknown)}")
    n_views = int(sim.get("n_views", 360))
    angles = float(sim.get("start_deg", 0.0)) + np.arange(n_views) * (360.0 / n_views)
    amp = float(sim.get("vignetting_amplitude", 0.0))
    cfg = SimulationConfig(
        geometry=geometry,
        rows=int(sim.get("rows", 64)),
        cols=int(sim.get("cols", 256)),
        angles_deg=angles,
        i0=float(sim.get("i0", 0.6)),
        vignetting=sinusoidal_vignetting(amp) if amp else None,
        noise_counts=sim.get("noise_counts"),
        mode=sim.get("mode", "planar"),
        bit_depth=int(sim.get("bit_depth", 16)),
        seed=seed,
    )
    if cfg.rows % 2 or cfg.cols % 2:
        raise ConfigError("simulated frames are written as Bayer mosaics and need even rows and cols")
    if cfg.i0 * float(np.max(cfg.gain())) > 1.0:
        raise ConfigError("i0 times the vignetting peak exceeds detector full scale")
    if phantom.bound_radius() >= cfg.field_of_view_radius():
        raise ConfigError(
            f"phantom reaches {phantom.bound_radius():.4g} mm from the axis; "
            f"the field of view radius is {cfg.field_of_view_radius():.4g} mm"
        )
    return phantom, cfg
