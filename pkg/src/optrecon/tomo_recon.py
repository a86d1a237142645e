"""Row-by-row fan-beam reconstruction.

Each detector row is treated as an independent planar fan-beam scan. Its
sinogram is rebinned onto a uniform parallel-beam grid, ramp filtered and
backprojected; the slices are stacked in detector-row order.

Coordinates follow :mod:`optrecon.synth_phantom`: fan sample ``(u, theta)``
is the parallel ray ``(s, phi) = (D sin(gamma), theta + gamma)`` with
``gamma = atan((u - c_x) / f_eff)``, and a parallel ray is the line
``x cos(phi) + y sin(phi) = s``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np

from .attenuation import AttenuationStack
from .errors import ConfigError, GeometryMissing, IncompleteScan, RowOutOfRange
from .geometry_calib import EffectiveGeometry
from .volume import Volume, centered_axis

log = logging.getLogger(__name__)

FILTERS = ("ramp", "hann")
FULL_SCAN_TOL_DEG = 1e-6


@dataclass
class FanSinogram:
    values: np.ndarray  # (n_cols, n_views), values[u, k]
    theta_deg: np.ndarray
    geometry: Optional[EffectiveGeometry]  # principal point in window coordinates
    row: int = 0

    @property
    def u(self) -> np.ndarray:
        return np.arange(self.values.shape[0], dtype=float)


@dataclass
class ParallelSinogram:
    values: np.ndarray  # (n_s, n_views), values[j, k]
    s: np.ndarray  # mm, uniform and symmetric about 0
    phi_deg: np.ndarray  # uniform over [0, 360)

    @property
    def ds(self) -> float:
        return float(self.s[1] - self.s[0])


@dataclass
class ReconSlice:
    values: np.ndarray  # (n, n), 1/mm
    pixel_size: float
    row: int = 0


@dataclass(frozen=True)
class ReconConfig:
    n: int = 256
    pixel_size: Optional[float] = None  # mm; None -> object-plane detector pixel
    filter: str = "ramp"
    circle: bool = True  # zero pixels outside the radius covered by every view

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 16:
            raise ConfigError(f"reconstruction grid must be at least 16 pixels, got {self.n}")
        if self.pixel_size is not None and not self.pixel_size > 0:
            raise ConfigError(f"pixel_size must be positive, got {self.pixel_size}")
        if self.filter not in FILTERS:
            raise ConfigError(f"unknown filter {self.filter!r}; expected one of {FILTERS}")

    def resolved_pixel_size(self, geometry: Optional[EffectiveGeometry]) -> float:
        if self.pixel_size is not None:
            return float(self.pixel_size)
        if geometry is None:
            raise GeometryMissing("pixel_size is unset and no geometry is available to derive it")
        return geometry.object_pixel_size


# ---------------------------------------------------------------------------
# sinogram extraction and rebinning


def extract_row_sinogram(att: AttenuationStack, row: int) -> FanSinogram:
    if not 0 <= row < att.rows:
        raise RowOutOfRange(f"row {row} outside 0..{att.rows - 1}")
    return FanSinogram(
        np.ascontiguousarray(att.values[row, :, :]),
        np.asarray(att.angles_deg, dtype=float),
        att.window_geometry,
        row,
    )


def fan_to_parallel_coords(u, theta_deg, geometry: EffectiveGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Parallel coordinates ``(s, phi_deg)`` of the fan ray through column ``u`` at view ``theta``."""
    gamma = np.arctan((np.asarray(u, dtype=float) - geometry.c_x) / geometry.f_eff)
    return geometry.axis_distance * np.sin(gamma), np.asarray(theta_deg, dtype=float) + np.degrees(gamma)


@dataclass
class RebinPlan:
    """Bilinear gather weights from a fan sinogram onto the parallel grid.

    Every target ``(s, phi)`` is inverted exactly to ``u = c_x + f tan(gamma)``
    and ``theta = phi - gamma`` with ``gamma = asin(s / D)``. Targets whose
    ``u`` falls off the detector use the conjugate ray ``(-s, phi + 180)``.
    """

    s: np.ndarray
    phi_deg: np.ndarray
    u0: np.ndarray
    wu: np.ndarray
    k0: np.ndarray
    k1: np.ndarray
    wk: np.ndarray
    valid: np.ndarray

    def apply(self, fan_values: np.ndarray) -> np.ndarray:
        f = fan_values
        a = f[self.u0, self.k0] * (1 - self.wk) + f[self.u0, self.k1] * self.wk
        b = f[self.u0 + 1, self.k0] * (1 - self.wk) + f[self.u0 + 1, self.k1] * self.wk
        out = a * (1 - self.wu) + b * self.wu
        return np.where(self.valid, out, 0.0)


def _check_full_scan(theta_deg: np.ndarray) -> tuple[float, float]:
    theta = np.asarray(theta_deg, dtype=float)
    n = len(theta)
    if n < 2:
        raise IncompleteScan("rebinning needs at least two views")
    step = (theta[-1] - theta[0]) / (n - 1)
    if abs(step * n - 360.0) > FULL_SCAN_TOL_DEG * n:
        raise IncompleteScan(
            f"{n} views at {step:.6g} deg cover {step * n:.6g} deg; a full 360 deg scan is required"
        )
    return float(theta[0]), 360.0 / n


def make_rebin_plan(n_cols: int, theta_deg: np.ndarray, geometry: Optional[EffectiveGeometry]) -> RebinPlan:
    if geometry is None:
        raise GeometryMissing("fan-to-parallel rebinning needs f_eff, axis distance and principal point")
    theta0, dtheta = _check_full_scan(theta_deg)
    n_views = len(theta_deg)
    f, dist, cx = geometry.f_eff, geometry.axis_distance, geometry.c_x

    gamma_ends = np.arctan((np.array([0.0, n_cols - 1.0]) - cx) / f)
    s_max = dist * math.sin(float(np.max(np.abs(gamma_ends))))
    s = np.linspace(-s_max, s_max, n_cols)
    phi = np.arange(n_views) * (360.0 / n_views)

    ss, pp = np.meshgrid(s, phi, indexing="ij")
    gamma = np.arcsin(np.clip(ss / dist, -1.0, 1.0))
    u = cx + f * np.tan(gamma)
    theta = pp - np.degrees(gamma)
    direct = (u >= 0) & (u <= n_cols - 1)
    # conjugate ray (-s, phi + 180): u' = c_x - f tan(gamma), theta' = phi + 180 + gamma
    u = np.where(direct, u, cx - f * np.tan(gamma))
    theta = np.where(direct, theta, pp + 180.0 + np.degrees(gamma))
    valid = (u >= 0) & (u <= n_cols - 1)

    u_c = np.clip(u, 0, n_cols - 1)
    u0 = np.minimum(np.floor(u_c).astype(np.intp), n_cols - 2)
    wu = u_c - u0
    q = np.mod(theta - theta0, 360.0) / dtheta
    qf = np.floor(q)
    wk = q - qf
    k0 = qf.astype(np.intp) % n_views
    k1 = (k0 + 1) % n_views
    return RebinPlan(s, phi, u0, wu, k0, k1, wk, valid)


def fan_to_parallel_rebin(fan: FanSinogram, plan: Optional[RebinPlan] = None) -> ParallelSinogram:
    if plan is None:
        plan = make_rebin_plan(fan.values.shape[0], fan.theta_deg, fan.geometry)
    return ParallelSinogram(plan.apply(fan.values), plan.s.copy(), plan.phi_deg.copy())


# ---------------------------------------------------------------------------
# filtering


def padded_length(n: int) -> int:
    """Smallest power of two that is at least ``2 n``."""
    return 1 << max(1, int(math.ceil(math.log2(2 * n))))


def ramp_kernel(n_pad: int, ds: float) -> np.ndarray:
    """Circular discrete Ram-Lak kernel of length ``n_pad``.

    ``h[0] = 1/(4 ds^2)``, ``h[k] = -1/(pi^2 k^2 ds^2)`` for odd ``k`` and 0 for
    even ``k``. The sample at offset ``n_pad / 2`` never reaches the cropped
    output; it is set so the kernel sums to zero (zero DC gain).
    """
    k = np.fft.fftfreq(n_pad, d=1.0 / n_pad)  # signed integer offsets
    h = np.zeros(n_pad)
    h[0] = 0.25
    odd = (k.astype(np.int64) % 2) == 1
    h[odd] = -1.0 / (np.pi**2 * k[odd] ** 2)
    nyq = n_pad // 2
    h[nyq] = 0.0
    h[nyq] = -h.sum()
    return h / ds**2


def filter_response(n_pad: int, ds: float, filter: str = "ramp") -> np.ndarray:
    """Real frequency response (rfft layout) of the selected ramp filter."""
    resp = np.fft.rfft(ramp_kernel(n_pad, ds)).real
    resp[0] = 0.0
    if filter == "hann":
        freq = np.fft.rfftfreq(n_pad)
        resp *= 0.5 * (1.0 + np.cos(2.0 * np.pi * freq))
    elif filter != "ramp":
        raise ConfigError(f"unknown filter {filter!r}")
    return resp


def filter_views(values: np.ndarray, ds: float, filter: str = "ramp", keep_padding: bool = False) -> np.ndarray:
    """Convolve each column of ``values`` (n_s, n_views) with the ramp kernel, times ``ds``."""
    n = values.shape[0]
    n_pad = padded_length(n)
    spec = np.fft.rfft(values, n=n_pad, axis=0)
    spec *= filter_response(n_pad, ds, filter)[:, None]
    out = np.fft.irfft(spec, n=n_pad, axis=0) * ds
    return out if keep_padding else out[:n]


def ramp_filter(par: ParallelSinogram, filter: str = "ramp") -> ParallelSinogram:
    steps = np.diff(par.s)
    if np.ptp(steps) > 1e-9 * abs(steps[0]):
        raise ConfigError("ramp filtering needs a uniform s grid")
    return ParallelSinogram(filter_views(par.values, par.ds, filter), par.s.copy(), par.phi_deg.copy())


# ---------------------------------------------------------------------------
# backprojection


@numba.njit(cache=True, nogil=True)
def _backproject_kernel(q, s0, ds, cos_phi, sin_phi, ax, out):
    # q is (n_views, n_s); out is (n, n) indexed [y, x]
    n_views, n_s = q.shape
    n = ax.shape[0]
    last = n_s - 1
    for k in range(n_views):
        cx = cos_phi[k] / ds
        sy = sin_phi[k] / ds
        off = s0 / ds
        for i in range(n):
            ty = ax[i] * sy
            for j in range(n):
                t = (ax[j] * cx - off) + ty
                if t >= 0.0 and t <= last:
                    i0 = int(math.floor(t))
                    if i0 > last - 1:
                        i0 = last - 1
                    w = t - i0
                    out[i, j] += q[k, i0] + w * (q[k, i0 + 1] - q[k, i0])


def backproject(filtered: ParallelSinogram, cfg: ReconConfig, pixel_size: Optional[float] = None) -> ReconSlice:
    """Linear-interpolation backprojection onto an ``n x n`` grid centred on the axis.

    Samples whose ``s`` falls outside the sinogram grid contribute nothing.
    The sum over a full 360 degree set is scaled by ``pi / n_views``. With
    ``cfg.circle`` the pixels farther from the axis than the largest ``|s|``
    are set to zero, since no view set there is complete.
    """
    px = float(pixel_size if pixel_size is not None else cfg.resolved_pixel_size(None))
    q = np.ascontiguousarray(filtered.values.T, dtype=np.float64)
    phis = np.radians(np.asarray(filtered.phi_deg, dtype=float))
    acc = np.zeros((cfg.n, cfg.n))
    _backproject_kernel(
        q, float(filtered.s[0]), filtered.ds, np.cos(phis), np.sin(phis), centered_axis(cfg.n, px), acc
    )
    acc *= math.pi / q.shape[0]
    if cfg.circle:
        ax = centered_axis(cfg.n, px)
        s_max = float(np.max(np.abs(filtered.s)))
        acc[np.hypot(ax[:, None], ax[None, :]) > s_max] = 0.0
    return ReconSlice(acc, px)


def reconstruct_slice(
    att: AttenuationStack,
    row: int,
    cfg: ReconConfig = ReconConfig(),
    plan: Optional[RebinPlan] = None,
) -> ReconSlice:
    fan = extract_row_sinogram(att, row)
    px = cfg.resolved_pixel_size(fan.geometry)
    par = fan_to_parallel_rebin(fan, plan)
    sl = backproject(ramp_filter(par, cfg.filter), cfg, pixel_size=px)
    sl.row = row
    return sl


def slice_heights(att: AttenuationStack) -> np.ndarray:
    """Height (mm) at the rotation axis of every detector row."""
    g = att.window_geometry
    if g is None:
        raise GeometryMissing("slice heights need the effective geometry")
    return (g.c_y - np.arange(att.rows)) * g.object_pixel_size


def reconstruct_volume(
    att: AttenuationStack,
    cfg: ReconConfig = ReconConfig(),
    threads: int = 1,
    progress: Optional[Callable[[int], None]] = None,
) -> Volume:
    """Reconstruct every detector row and stack the slices in row order.

    Rows are independent; with ``threads > 1`` they are processed by a thread
    pool and placed by row index, so the result does not depend on the
    number of workers.
    """
    g = att.window_geometry
    if g is None:
        raise GeometryMissing("volume reconstruction needs the effective geometry")
    px = cfg.resolved_pixel_size(g)
    plan = make_rebin_plan(att.cols, att.angles_deg, g)
    out = np.empty((att.rows, cfg.n, cfg.n))

    def work(row: int) -> int:
        out[row] = reconstruct_slice(att, row, cfg, plan).values
        if progress is not None:
            progress(row)
        return row

    if threads <= 1:
        for row in range(att.rows):
            work(row)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(att.rows)))

    row_pitch = g.object_pixel_size
    meta = {
        "geometry": g.to_dict(),
        "recon": {"n": cfg.n, "pixel_size": px, "filter": cfg.filter, "circle": cfg.circle, "interpolation": "bilinear"},
    }
    return Volume(out, px, row_pitch, slice_heights(att), meta)
