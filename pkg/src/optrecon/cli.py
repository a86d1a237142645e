"""Command-line entry point: ``optrecon <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .attenuation import beer_lambert, estimate_incident_field
from .config import PipelineConfig, load_config, simulation_from_config
from .errors import ConfigError, DataError, OptReconError, UnreadableFile
from .geometry_calib import (
    TargetMeasurement,
    calibrate,
    derive_effective_geometry,
    estimate_magnification,
    read_corners_csv,
    reprojection_residuals,
    CameraIntrinsics,
)
from .raw_ingest import assemble_stack, load_frame, read_capture_metadata, read_manifest, write_pgm
from .synth_phantom import mosaic_from_green, simulate_acquisition
from .tomo_recon import reconstruct_volume
from .volume import Volume, export_previews, export_tiff_slices, read_volume, write_volume

log = logging.getLogger("optrecon")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_array(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


class StageTimer:
    """Times pipeline stages and tags errors with the stage they came from."""

    def __init__(self):
        self.timings: dict[str, float] = {}

    @contextlib.contextmanager
    def __call__(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except OptReconError as exc:
            if not getattr(exc, "stage", None):
                exc.stage = name
            raise
        elapsed = time.perf_counter() - start
        self.timings[name] = round(elapsed, 6)


def _log_stage(name: str, seconds: float, **hashes) -> None:
    extra = " ".join(f"{k}={v[:12]}" for k, v in hashes.items())
    log.info("stage %-12s %8.3fs %s", name, seconds, extra)


# ---------------------------------------------------------------------------
# calibrate / magnify


def calibration_report(intr: CameraIntrinsics, residuals: dict, n_squares: int, planes: list) -> str:
    k = intr.matrix
    lines = [
        "Camera calibration (zero skew)",
        f"  squares: {n_squares} on planes {planes}",
        f"  f_x = {intr.f_x:.6f} px",
        f"  f_y = {intr.f_y:.6f} px",
        f"  c_x = {intr.c_x:.6f} px",
        f"  c_y = {intr.c_y:.6f} px",
        "  K =",
        *("    " + " ".join(f"{x:14.6f}" for x in row) for row in k),
        f"  conic constraint rms: {residuals['conic_rms']:.3e}",
    ]
    worst = max(residuals["squares"], key=lambda r: r["cos_angle"])
    lines.append(f"  worst square orthogonality |cos|: {worst['cos_angle']:.3e}")
    return "\n".join(lines) + "\n"


def cmd_calibrate(args) -> int:
    squares = read_corners_csv(args.corners)
    intr = calibrate(squares)
    residuals = reprojection_residuals(squares, intr)
    planes = sorted({sq.plane_id for sq in squares})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sidecar = {**intr.to_dict(), "residuals": residuals, "n_squares": len(squares), "plane_ids": planes}
    out.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    report = calibration_report(intr, residuals, len(squares), planes)
    out.with_suffix(".txt").write_text(report)
    print(report, end="")
    return 0


def _measurement(values) -> TargetMeasurement:
    width, px, dist = values
    return TargetMeasurement(width, px, dist)


def cmd_magnify(args) -> int:
    try:
        calib = json.loads(Path(args.calibration).read_text())
    except OSError as exc:
        raise UnreadableFile(f"cannot read calibration {args.calibration}: {exc}") from exc
    intr = CameraIntrinsics.from_matrix(np.asarray(calib["K"], dtype=float))
    mag = estimate_magnification(_measurement(args.bare), _measurement(args.lens))
    geom = derive_effective_geometry(intr, mag, args.f_bare, args.axis_distance)
    sidecar = {
        **intr.to_dict(),
        "K_normalized": calib.get("K_normalized"),
        "T": calib.get("T"),
        "residuals": calib.get("residuals"),
        "M": mag.m,
        "bare_angular_extent_rad_per_px": mag.bare_angular_extent,
        "lens_angular_extent_rad_per_px": mag.lens_angular_extent,
        "p": geom.pixel_pitch,
        "f_eff": geom.f_eff,
        "effective_geometry": geom.to_dict(),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    print(f"M = {mag.m:.6f}  p = {geom.pixel_pitch:.6g} mm  f_eff = {geom.f_eff:.6f} px")
    return 0


# ---------------------------------------------------------------------------
# preprocess / reconstruct


def _load_stack(cfg: PipelineConfig, timer: StageTimer, manifest: dict):
    with timer("ingest"):
        meta = read_capture_metadata(cfg.input_dir)
        entries = read_manifest(cfg.input_dir)
        if not entries:
            raise DataError(f"{cfg.input_dir}/manifest.csv lists no frames")
        pattern, bit_depth = meta["pattern"], int(meta["bit_depth"])

        def load(entry):
            name, angle = entry
            return load_frame(cfg.input_dir, name, angle, pattern, bit_depth)

        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            frames = list(pool.map(load, entries))
        stack = assemble_stack(frames, cfg.crop, cfg.geometry)
        stack.metadata["capture"] = meta
        inputs = {name: sha256_file(cfg.input_dir / name) for name, _ in entries}
        inputs["manifest.csv"] = sha256_file(cfg.input_dir / "manifest.csv")
        inputs["capture.json"] = sha256_file(cfg.input_dir / "capture.json")
        manifest["inputs"] = inputs
        manifest["capture"] = meta
    _log_stage("ingest", timer.timings["ingest"], out=sha256_array(stack.values))
    return stack


def _attenuate(cfg: PipelineConfig, stack, timer: StageTimer):
    with timer("attenuation"):
        fld = estimate_incident_field(stack, cfg.air)
        att = beer_lambert(stack, fld)
    _log_stage("attenuation", timer.timings["attenuation"], out=sha256_array(att.values))
    return fld, att


def _base_manifest(cfg: PipelineConfig, command: str) -> dict:
    return {"tool": "optrecon", "version": __version__, "command": command, "config": cfg.snapshot()}


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    out = _output_dir(cfg)
    timer = StageTimer()
    manifest = _base_manifest(cfg, "preprocess")
    stack = _load_stack(cfg, timer, manifest)
    fld, att = _attenuate(cfg, stack, timer)
    with timer("write"):
        np.save(out / "attenuation.npy", att.values.astype("<f4"))
        np.save(out / "angles_deg.npy", att.angles_deg)
        with (out / "incident_field.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", *(f"{a:.6f}" for a in att.angles_deg)])
            for v, row in enumerate(fld.values):
                w.writerow([v, *(f"{x:.9g}" for x in row)])
        if cfg.write_tiff:
            import tifffile

            tdir = out / "attenuation_tiff"
            tdir.mkdir(exist_ok=True)
            for k in range(att.n_angles):
                tifffile.imwrite(tdir / f"att_{k:04d}.tif", att.values[:, :, k].astype(np.float32))
    manifest["outputs"] = {"attenuation.npy": sha256_file(out / "attenuation.npy")}
    manifest["timings_s"] = timer.timings
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    if cfg.geometry is None:
        raise ConfigError("reconstruction needs a [geometry] section")
    out = _output_dir(cfg)
    timer = StageTimer()
    manifest = _base_manifest(cfg, "reconstruct")
    stack = _load_stack(cfg, timer, manifest)
    _, att = _attenuate(cfg, stack, timer)

    progress = None
    if args.verbose:
        def progress(row):
            log.debug("reconstructed row %d/%d", row + 1, att.rows)

    with timer("reconstruct"):
        vol = reconstruct_volume(att, cfg.recon, threads=cfg.threads, progress=progress)
    _log_stage("reconstruct", timer.timings["reconstruct"], out=vol.content_hash())

    with timer("write"):
        raw = write_volume(out / "volume", vol, {"pipeline": cfg.snapshot(), "version": __version__})
        outputs = {raw.name: sha256_file(raw)}
        if cfg.write_tiff:
            for p in export_tiff_slices(vol, out / "slices"):
                outputs[f"slices/{p.name}"] = sha256_file(p)
    _log_stage("write", timer.timings["write"], volume=outputs[raw.name])
    manifest["outputs"] = outputs
    manifest["timings_s"] = timer.timings
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"volume {vol.shape[2]}x{vol.shape[1]}x{vol.shape[0]} written to {raw} (sha256 {outputs[raw.name][:16]})")
    return 0


# ---------------------------------------------------------------------------
# simulate / export / selftest


def cmd_simulate(args) -> int:
    cfg = _config(args, require_input=False)
    if cfg.simulation is None:
        raise ConfigError("simulate needs a [simulation] section")
    if cfg.input_dir is None:
        raise ConfigError("simulate writes to [paths] input, which is unset")
    phantom, sim = simulation_from_config(cfg.simulation, cfg.geometry, cfg.base_dir, cfg.seed)
    pattern = cfg.simulation.get("pattern", "RGGB")
    timer = StageTimer()
    with timer("simulate"):
        stack = simulate_acquisition(phantom, sim)
    with timer("write"):
        out = cfg.input_dir
        out.mkdir(parents=True, exist_ok=True)
        maxval = 2**sim.bit_depth - 1
        rows = [("filename", "angle_deg")]
        for k, angle in enumerate(stack.angles_deg):
            codes = np.clip(np.rint(stack.values[:, :, k] * maxval), 0, maxval)
            name = f"frame_{k:04d}.pgm"
            write_pgm(out / name, mosaic_from_green(codes, pattern), maxval=maxval)
            rows.append((name, repr(float(angle))))
        with (out / "manifest.csv").open("w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        capture = {"pattern": pattern, "bit_depth": sim.bit_depth, "simulated": True, "seed": cfg.seed}
        (out / "capture.json").write_text(json.dumps(capture, indent=2, sort_keys=True))
        (out / "geometry.json").write_text(json.dumps(sim.geometry.to_dict(), indent=2, sort_keys=True))
    _log_stage("simulate", timer.timings["simulate"], out=sha256_array(stack.values))
    print(f"wrote {len(stack.angles_deg)} frames to {out}")
    return 0


def cmd_export(args) -> int:
    vol = read_volume(args.volume)
    out = Path(args.out)
    if args.format == "tiff":
        paths = export_tiff_slices(vol, out)
    else:
        paths = export_previews(vol, out)
    print(f"wrote {len(paths)} {args.format} slices to {out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(print) else 4


# ---------------------------------------------------------------------------


def _config(args, require_input: bool = True) -> PipelineConfig:
    if not args.config:
        raise ConfigError("--config is required")
    overrides = list(args.set or [])
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides, require_input=require_input)


def _output_dir(cfg: PipelineConfig) -> Path:
    if cfg.output_dir is None:
        raise ConfigError("[paths] output is required")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


def _triple(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected WIDTH_MM,PIXELS,DISTANCE_MM")
    return tuple(float(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline TOML file")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="optrecon", description="Optical projection tomography reconstruction")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[common], help="intrinsics from square corners")
    p.add_argument("corners", help="CSV: plane_id,u00,v00,u10,v10,u01,v01,u11,v11")
    p.add_argument("--out", required=True, help="JSON sidecar path (a .txt report is written next to it)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("magnify", parents=[common], help="magnification and effective geometry")
    p.add_argument("--calibration", required=True)
    p.add_argument("--bare", type=_triple, required=True, metavar="W,PX,DIST")
    p.add_argument("--lens", type=_triple, required=True, metavar="W,PX,DIST")
    p.add_argument("--f-bare", type=float, required=True, help="physical focal length of the bare camera (mm)")
    p.add_argument("--axis-distance", type=float, required=True, help="camera centre to rotation axis (mm)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_magnify)

    for name, func, help_ in (
        ("preprocess", cmd_preprocess, "frames to attenuation projections"),
        ("reconstruct", cmd_reconstruct, "full pipeline to a volume"),
        ("simulate", cmd_simulate, "write a synthetic dataset"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)

    p = sub.add_parser("export", parents=[common], help="volume to TIFF slices or 8-bit previews")
    p.add_argument("volume", help="volume path (with or without .raw/.json suffix)")
    p.add_argument("--format", choices=("tiff", "preview"), default="tiff")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("selftest", parents=[common], help="quick synthetic end-to-end check")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args)
    except OptReconError as exc:
        stage = getattr(exc, "stage", None)
        where = f" during {stage}" if stage else ""
        print(f"optrecon {args.command}: {type(exc).__name__}{where}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"optrecon {args.command}: {exc}", file=sys.stderr)
        return UnreadableFile.exit_code


if __name__ == "__main__":
    sys.exit(main())
