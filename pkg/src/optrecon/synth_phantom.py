"""Analytic phantoms and a fan-beam acquisition simulator.

Object frame: the rotation axis is ``z``. At view angle ``theta`` the camera
centre sits at ``D * (-sin theta, cos theta, 0)`` and looks at the axis. The
detector column ``u`` sees the ray with fan angle
``gamma = atan((u - c_x) / f_eff)``, which in the plane is the parallel-beam
line ``x cos(phi) + y sin(phi) = s`` with ``s = D sin(gamma)`` and
``phi = theta + gamma``. Row ``v`` lies at height ``z = (c_y - v) * D / f_eff``.

Chord lengths come from closed-form ray/quadric intersections, so every
projection here is exact up to floating point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError
from .geometry_calib import EffectiveGeometry, SquareObservation
from .raw_ingest import CropRegion, ProjectionStack
from .volume import Volume, centered_axis

_INF = np.inf


def _slab(o: np.ndarray, d: np.ndarray, lo: float, hi: float):
    # parameter interval where lo <= o + t d <= hi
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    t_lo = np.where(d == 0, np.where((o >= lo) & (o <= hi), -_INF, _INF), np.minimum(t1, t2))
    t_hi = np.where(d == 0, np.where((o >= lo) & (o <= hi), _INF, -_INF), np.maximum(t1, t2))
    return t_lo, t_hi


def _centered_quadric_interval(o: list, d: list, rr: float):
    # {t : |o + t d|^2 <= rr}; solved about the closest approach to the origin to
    # avoid cancellation when the ray starts far from the shape
    dd = sum(di * di for di in d)
    safe = np.where(dd > 0, dd, 1.0)
    t0 = -sum(oi * di for oi, di in zip(o, d)) / safe
    closest = sum((oi + t0 * di) ** 2 for oi, di in zip(o, d))
    half_sq = (rr - closest) / safe
    ok = (half_sq > 0) & (dd > 0)
    half = np.sqrt(np.where(ok, half_sq, 0.0))
    return np.where(ok, t0 - half, _INF), np.where(ok, t0 + half, -_INF)


@dataclass(frozen=True)
class PhantomPrimitive:
    """One analytic shape with a uniform attenuation ``mu`` (1/mm).

    ``shape`` is one of ``disk``, ``ellipse`` (both extruded along z),
    ``sphere`` or ``cylinder`` (finite, vertical). ``semi_axes`` holds the
    radius, or the two ellipse semi-axes; ``angle_deg`` rotates an ellipse;
    ``z_extent`` bounds a cylinder.
    """

    shape: str
    center: tuple = (0.0, 0.0, 0.0)
    semi_axes: tuple = (1.0,)
    mu: float = 1.0
    angle_deg: float = 0.0
    z_extent: tuple = (-_INF, _INF)

    def __post_init__(self):
        if self.shape not in ("disk", "ellipse", "sphere", "cylinder"):
            raise DataError(f"unknown primitive shape {self.shape!r}")
        c = tuple(float(x) for x in self.center) + (0.0,) * (3 - len(self.center))
        axes = tuple(float(x) for x in np.atleast_1d(self.semi_axes))
        if self.shape == "ellipse" and len(axes) == 1:
            axes = axes * 2
        if self.shape != "ellipse":
            axes = axes[:1]
        if any(a <= 0 for a in axes):
            raise DataError(f"{self.shape} dimensions must be positive, got {axes}")
        if self.mu < 0:
            raise DataError(f"attenuation must be >= 0, got {self.mu}")
        z = tuple(float(x) for x in self.z_extent)
        if self.shape == "cylinder" and not z[0] < z[1]:
            raise DataError(f"cylinder z extent must be increasing, got {z}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "semi_axes", axes)
        object.__setattr__(self, "z_extent", z)

    @property
    def radius(self) -> float:
        return self.semi_axes[0]

    def bound_radius(self) -> float:
        """Largest distance from the rotation axis reached by the shape."""
        return math.hypot(self.center[0], self.center[1]) + max(self.semi_axes)

    def contains(self, x, y, z) -> np.ndarray:
        x, y, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, y, z)))
        cx, cy, cz = self.center
        dx, dy = x - cx, y - cy
        if self.shape == "sphere":
            return dx**2 + dy**2 + (z - cz) ** 2 <= self.radius**2
        if self.shape == "ellipse":
            a, b = self.semi_axes
            t = math.radians(self.angle_deg)
            xr = dx * math.cos(t) + dy * math.sin(t)
            yr = -dx * math.sin(t) + dy * math.cos(t)
            inside = (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
        else:
            inside = dx**2 + dy**2 <= self.radius**2
        if self.shape == "cylinder":
            inside = inside & (z >= self.z_extent[0]) & (z <= self.z_extent[1])
        return inside

    def chord(self, origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
        """Length of the intersection of lines ``origin + t * direction`` with the shape.

        ``origin`` and ``direction`` are (..., 3) arrays; ``direction`` must be unit length.
        """
        o = np.asarray(origin, dtype=float) - np.asarray(self.center)
        d = np.asarray(direction, dtype=float)
        ox, oy, oz = o[..., 0], o[..., 1], o[..., 2]
        dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
        if self.shape == "sphere":
            r = self.radius
            t_lo, t_hi = _centered_quadric_interval([ox, oy, oz], [dx, dy, dz], r * r)
        else:
            if self.shape == "ellipse":
                a, b = self.semi_axes
                t = math.radians(self.angle_deg)
                ct, st = math.cos(t), math.sin(t)
                ox, oy = (ox * ct + oy * st) / a, (-ox * st + oy * ct) / b
                dx, dy = (dx * ct + dy * st) / a, (-dx * st + dy * ct) / b
                rr = 1.0
            else:
                rr = self.radius**2
            t_lo, t_hi = _centered_quadric_interval([ox, oy], [dx, dy], rr)
            if self.shape == "cylinder":
                z_lo, z_hi = _slab(oz, dz, self.z_extent[0] - self.center[2], self.z_extent[1] - self.center[2])
                t_lo, t_hi = np.maximum(t_lo, z_lo), np.minimum(t_hi, z_hi)
        return np.maximum(t_hi - t_lo, 0.0)


@dataclass
class DigitalPhantom:
    primitives: list = field(default_factory=list)

    def bound_radius(self) -> float:
        return max((p.bound_radius() for p in self.primitives), default=0.0)

    def mu_at(self, x, y, z) -> np.ndarray:
        x, y, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, y, z)))
        out = np.zeros(x.shape)
        for p in self.primitives:
            out += p.mu * p.contains(x, y, z)
        return out

    def line_integral(self, origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
        o = np.asarray(origin, dtype=float)
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        shape = np.broadcast_shapes(o.shape, d.shape)[:-1]
        out = np.zeros(shape)
        for p in self.primitives:
            out += p.mu * p.chord(o, d)
        return out

    def max_mu(self) -> float:
        return sum(p.mu for p in self.primitives)


# ---------------------------------------------------------------------------
# projections


def analytic_parallel_projection(ph: DigitalPhantom, s, phi_deg, z=0.0) -> np.ndarray:
    """Line integral along ``x cos(phi) + y sin(phi) = s`` in the plane at height ``z``."""
    s, phi, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (s, phi_deg, z)))
    p = np.radians(phi)
    c, sn = np.cos(p), np.sin(p)
    origin = np.stack([s * c, s * sn, z], axis=-1)
    direction = np.stack([-sn, c, np.zeros_like(c)], axis=-1)
    return ph.line_integral(origin, direction)


def fan_rays(geometry: EffectiveGeometry, u, v, theta_deg, mode: str = "planar"):
    """Origins and unit directions of the detector rays for pixel ``(u, v)`` at view ``theta``.

    ``u``, ``v`` are in the detector window whose principal point is ``geometry.principal_point``.
    """
    if mode not in ("planar", "oblique"):
        raise ConfigError(f"unknown ray mode {mode!r}")
    u, v, th = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, v, theta_deg)))
    f, dist = geometry.f_eff, geometry.axis_distance
    th = np.radians(th)
    x = (u - geometry.c_x) / f
    y = (geometry.c_y - v) / f
    # optical axis a = -(-sin, cos), right vector n = (cos, sin)
    ax, ay = np.sin(th), -np.cos(th)
    nx, ny = np.cos(th), np.sin(th)
    dx, dy = ax + x * nx, ay + x * ny
    if mode == "planar":
        origin = np.stack([-dist * ax, -dist * ay, y * dist], axis=-1)
        direction = np.stack([dx, dy, np.zeros_like(dx)], axis=-1)
    else:
        origin = np.stack([-dist * ax, -dist * ay, np.zeros_like(dx)], axis=-1)
        direction = np.stack([dx, dy, y], axis=-1)
    return origin, direction / np.linalg.norm(direction, axis=-1, keepdims=True)


def analytic_fan_projection(ph: DigitalPhantom, geometry: EffectiveGeometry, u, v, theta_deg, mode: str = "planar"):
    origin, direction = fan_rays(geometry, u, v, theta_deg, mode)
    return ph.line_integral(origin, direction)


# ---------------------------------------------------------------------------
# acquisition


def _unit_profile(rows: int) -> np.ndarray:
    return np.ones(rows)


@dataclass
class SimulationConfig:
    """Detector, scan and illumination settings for :func:`simulate_acquisition`.

    ``i0`` is the unattenuated intensity as a fraction of detector full scale.
    ``vignetting`` is either a length-``rows`` array or a callable of
    ``(v, rows)``. ``noise_counts`` switches on Poisson noise with that many
    expected counts at intensity ``i0``.
    """

    geometry: EffectiveGeometry
    rows: int
    cols: int
    angles_deg: np.ndarray
    i0: float = 0.6
    vignetting: Union[None, np.ndarray, Callable] = None
    noise_counts: Optional[float] = None
    mode: str = "planar"
    bit_depth: int = 16
    seed: int = 0

    def __post_init__(self):
        self.angles_deg = np.asarray(self.angles_deg, dtype=float)
        if not self.i0 > 0:
            raise ConfigError(f"i0 must be positive, got {self.i0}")
        if self.rows < 1 or self.cols < 2 or len(self.angles_deg) < 2:
            raise ConfigError("simulation needs rows >= 1, cols >= 2 and at least 2 views")
        if self.noise_counts is not None and not self.noise_counts > 0:
            raise ConfigError(f"noise_counts must be positive, got {self.noise_counts}")
        if np.any(self.gain() <= 0):
            raise ConfigError("vignetting profile must be strictly positive")

    def gain(self) -> np.ndarray:
        if self.vignetting is None:
            return _unit_profile(self.rows)
        if callable(self.vignetting):
            return np.asarray(self.vignetting(np.arange(self.rows, dtype=float), self.rows), dtype=float)
        g = np.asarray(self.vignetting, dtype=float)
        if g.shape != (self.rows,):
            raise ConfigError(f"vignetting profile must have {self.rows} entries, got {g.shape}")
        return g

    def field_of_view_radius(self) -> float:
        g = self.geometry
        gmax = max(abs(math.atan((0 - g.c_x) / g.f_eff)), abs(math.atan((self.cols - 1 - g.c_x) / g.f_eff)))
        return g.axis_distance * math.sin(gmax)


def sinusoidal_vignetting(amplitude: float = 0.3) -> Callable:
    """``g(v) = 1 + amplitude * sin(pi v / rows)``."""

    def g(v, rows):
        return 1.0 + amplitude * np.sin(np.pi * np.asarray(v) / rows)

    return g


def simulate_line_integrals(ph: DigitalPhantom, cfg: SimulationConfig) -> np.ndarray:
    """Exact ``mu[v, u, k]`` for every detector pixel and view."""
    vv, uu = np.meshgrid(np.arange(cfg.rows, dtype=float), np.arange(cfg.cols, dtype=float), indexing="ij")
    out = np.empty((cfg.rows, cfg.cols, len(cfg.angles_deg)))
    for k, th in enumerate(cfg.angles_deg):
        out[:, :, k] = analytic_fan_projection(ph, cfg.geometry, uu, vv, th, cfg.mode)
    return out


def simulate_acquisition(ph: DigitalPhantom, cfg: SimulationConfig) -> ProjectionStack:
    """Intensity stack ``I = i0 * g(v) * exp(-mu)``, optionally Poisson-noisy."""
    mu = simulate_line_integrals(ph, cfg)
    clean = cfg.i0 * cfg.gain()[:, None, None] * np.exp(-mu)
    if cfg.noise_counts is None:
        values = clean
    else:
        # one counter-based stream per view keeps noise independent of scheduling
        seeds = np.random.SeedSequence(cfg.seed).spawn(len(cfg.angles_deg))
        scale = cfg.noise_counts / cfg.i0
        values = np.empty_like(clean)
        for k, ss in enumerate(seeds):
            rng = np.random.Generator(np.random.Philox(ss))
            values[:, :, k] = rng.poisson(clean[:, :, k] * scale) / scale
    return ProjectionStack(
        values,
        cfg.angles_deg.copy(),
        CropRegion.full(cfg.cols, cfg.rows),
        geometry=cfg.geometry,
        bit_depth=cfg.bit_depth,
        metadata={"simulated": True, "mode": cfg.mode},
    )


def mosaic_from_green(green_codes: np.ndarray, pattern: str = "RGGB", red_blue_ratio: float = 0.8) -> np.ndarray:
    """Bayer mosaic whose green sites carry ``green_codes`` and red/blue sites a scaled copy."""
    rows, cols = np.indices(green_codes.shape)
    parity = 1 if pattern in ("RGGB", "BGGR") else 0
    green = (rows + cols) % 2 == parity
    out = np.where(green, green_codes, np.rint(red_blue_ratio * green_codes))
    return out.astype(np.uint16)


# ---------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True)
class GridSpec:
    n: int
    pixel_size: float
    z_coords: tuple

    @classmethod
    def from_volume(cls, vol: Volume) -> "GridSpec":
        return cls(vol.shape[2], vol.pixel_size, tuple(np.asarray(vol.z_coords, dtype=float)))


def rasterize_phantom(ph: DigitalPhantom, grid: GridSpec) -> Volume:
    """Centre-point sampled attenuation on the reconstruction grid."""
    ax = centered_axis(grid.n, grid.pixel_size)
    z = np.asarray(grid.z_coords, dtype=float)
    zz, yy, xx = np.meshgrid(z, ax, ax, indexing="ij")
    pitch = float(abs(z[1] - z[0])) if len(z) > 1 else grid.pixel_size
    return Volume(ph.mu_at(xx, yy, zz), grid.pixel_size, pitch, z.copy(), {"ground_truth": True})


# ---------------------------------------------------------------------------
# phantom files (TOML)


def phantom_from_dict(d: dict) -> DigitalPhantom:
    prims = []
    for item in d.get("primitive", d.get("primitives", [])):
        item = dict(item)
        shape = item.pop("shape")
        kwargs = {"shape": shape, "mu": float(item.pop("mu", 1.0))}
        if "center" in item:
            kwargs["center"] = tuple(item.pop("center"))
        if "radius" in item:
            kwargs["semi_axes"] = (float(item.pop("radius")),)
        if "semi_axes" in item:
            kwargs["semi_axes"] = tuple(item.pop("semi_axes"))
        if "angle_deg" in item:
            kwargs["angle_deg"] = float(item.pop("angle_deg"))
        if "z_extent" in item:
            kwargs["z_extent"] = tuple(item.pop("z_extent"))
        if item:
            raise ConfigError(f"unknown phantom keys {sorted(item)} for {shape}")
        prims.append(PhantomPrimitive(**kwargs))
    return DigitalPhantom(prims)


def load_phantom(path) -> DigitalPhantom:
    import tomli

    try:
        with Path(path).open("rb") as fh:
            return phantom_from_dict(tomli.load(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read phantom file {path}: {exc}") from exc


def sphere_cylinder_phantom() -> DigitalPhantom:
    """Sphere (r 0.4 mm, 1.0/mm) with an offset vertical cylinder (r 0.1 mm, 2.0/mm)."""
    return DigitalPhantom(
        [
            PhantomPrimitive("sphere", (0.0, 0.0, 0.0), (0.4,), mu=1.0),
            PhantomPrimitive("cylinder", (0.18, 0.08, 0.0), (0.1,), mu=2.0, z_extent=(-0.06, 0.06)),
        ]
    )


def default_geometry(cols: int = 256, rows: int = 64) -> EffectiveGeometry:
    """A desk-scale magnified phone camera: 5 um object pixels at the axis.

    With 256 columns the field of view is about +-0.64 mm, leaving the default
    40-column air margins clear of a 0.4 mm sphere.
    """
    return EffectiveGeometry(
        f_eff=10000.0,
        pixel_pitch=0.0015,
        principal_point=((cols - 1) / 2.0, (rows - 1) / 2.0),
        axis_distance=50.0,
    )


# ---------------------------------------------------------------------------
# calibration targets


def synthetic_calibration_squares(
    k: np.ndarray,
    noise_px: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    counts: Sequence[int] = (5, 4, 4),
    tilt_deg: float = 45.0,
    distance: float = 250.0,
    side: float = 50.0,
) -> list[SquareObservation]:
    """Imaged squares of a checkerboard seen in one tilted pose per plane.

    Each plane carries up to five black squares of a 3x3 checkerboard, tilted
    by ``tilt_deg`` about a diagonal axis and centred ``distance`` mm in front
    of the camera. With the defaults and a 1280x720 sensor all corners stay
    inside the image.
    """
    from scipy.spatial.transform import Rotation

    k = np.asarray(k, dtype=float)
    if noise_px and rng is None:
        rng = np.random.default_rng()
    axes = [(1.0, 1.0, 0.0), (1.0, -1.0, 0.0), (-1.0, 1.0, 0.0), (-1.0, -1.0, 0.0)]
    cells = [(-1.5, -1.5), (0.5, -1.5), (-0.5, -0.5), (-1.5, 0.5), (0.5, 0.5)]
    unit = [(0, 0), (1, 0), (0, 1), (1, 1)]
    squares = []
    for plane_id, n in enumerate(counts):
        ax = np.asarray(axes[plane_id % len(axes)])
        rot = Rotation.from_rotvec(math.radians(tilt_deg) * ax / np.linalg.norm(ax)).as_matrix()
        t = np.array([0.0, 0.0, distance])
        for a, b in cells[:n]:
            pts = np.array([[(a + cx) * side, (b + cy) * side, 0.0] for cx, cy in unit])
            cam = pts @ rot.T + t
            img = cam @ k.T
            corners = img[:, :2] / img[:, 2:3]
            if noise_px:
                corners = corners + rng.normal(0.0, noise_px, corners.shape)
            squares.append(SquareObservation(corners, plane_id))
    return squares
