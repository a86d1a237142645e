"""Camera intrinsics from square observations, magnification and fan geometry.

The intrinsic matrix is estimated with the image-of-the-absolute-conic
method under a zero-skew model: every imaged square gives a plane-to-image
homography, every homography gives two linear constraints on the conic
``omega = (K K^T)^-1``, and ``K`` follows from a Cholesky factorization of
the least-squares conic.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AllPointsCoincident,
    AmbiguousSolution,
    ConfigError,
    DataError,
    DegenerateCorners,
    InsufficientConstraints,
    InvalidElement,
    NonPositiveExtent,
    NotPositiveDefinite,
    UnreadableFile,
)

log = logging.getLogger(__name__)

#: Canonical corner order (row-major over the unit square).
CANONICAL_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])

AMBIGUITY_RTOL = 1e-8
SKEW_TOL = 1e-9


@dataclass(frozen=True)
class SquareObservation:
    """Four imaged corners of a physical square.

    ``corners`` is a (4, 2) array of (u, v) pixel coordinates, ordered to
    match the canonical corners (0,0), (1,0), (0,1), (1,1).
    """

    corners: np.ndarray
    plane_id: int = 0

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=float)
        if c.shape != (4, 2):
            raise DataError(f"square corners must have shape (4, 2), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise DataError("square corners must be finite")
        object.__setattr__(self, "corners", c)


@dataclass(frozen=True)
class NormalizationTransform:
    alpha: float
    t_x: float
    t_y: float
    mean_distance: float = float("nan")

    @property
    def matrix(self) -> np.ndarray:
        a = self.alpha
        return np.array([[a, 0.0, -a * self.t_x], [0.0, a, -a * self.t_y], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        a = self.alpha
        return np.array([[1.0 / a, 0.0, self.t_x], [0.0, 1.0 / a, self.t_y], [0.0, 0.0, 1.0]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) pixel points into normalized coordinates."""
        pts = np.asarray(points, dtype=float)
        return self.alpha * (pts - np.array([self.t_x, self.t_y]))

    @classmethod
    def identity(cls) -> "NormalizationTransform":
        return cls(1.0, 0.0, 0.0, math.sqrt(2.0))


@dataclass(frozen=True)
class Homography:
    """Plane-to-image homography: ``observed ~ h @ canonical``."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        h = h / np.linalg.norm(h)
        if h[2, 2] < 0:
            h = -h
        object.__setattr__(self, "h", h)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        hom = np.column_stack([pts, np.ones(len(pts))]) @ self.h.T
        return hom[:, :2] / hom[:, 2:3]


@dataclass(frozen=True)
class AbsoluteConicImage:
    omega: np.ndarray
    singular_values: np.ndarray = field(default_factory=lambda: np.empty(0))

    @classmethod
    def from_vector(cls, w, singular_values=None) -> "AbsoluteConicImage":
        w11, w13, w22, w23, w33 = w
        omega = np.array([[w11, 0.0, w13], [0.0, w22, w23], [w13, w23, w33]])
        sv = np.empty(0) if singular_values is None else np.asarray(singular_values)
        return cls(omega, sv)

    @property
    def vector(self) -> np.ndarray:
        o = self.omega
        return np.array([o[0, 0], o[0, 2], o[1, 1], o[1, 2], o[2, 2]])


@dataclass(frozen=True)
class CameraIntrinsics:
    f_x: float
    f_y: float
    c_x: float
    c_y: float
    normalized_k: np.ndarray = field(default_factory=lambda: np.eye(3))
    norm_transform: NormalizationTransform = field(default_factory=NormalizationTransform.identity)
    skew: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.f_x, 0.0, self.c_x], [0.0, self.f_y, self.c_y], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, k, **kwargs) -> "CameraIntrinsics":
        k = np.asarray(k, dtype=float)
        return cls(float(k[0, 0]), float(k[1, 1]), float(k[0, 2]), float(k[1, 2]), **kwargs)

    def to_dict(self) -> dict:
        t = self.norm_transform
        return {
            "K": self.matrix.tolist(),
            "K_normalized": np.asarray(self.normalized_k).tolist(),
            "T": t.matrix.tolist(),
            "f_x": self.f_x,
            "f_y": self.f_y,
            "c_x": self.c_x,
            "c_y": self.c_y,
        }


@dataclass(frozen=True)
class TargetMeasurement:
    """A resolution-target bar of known width imaged at a measured distance."""

    feature_physical_width: float  # mm
    feature_pixel_width: float  # px
    camera_to_target_distance: float  # mm

    def __post_init__(self):
        for name in ("feature_physical_width", "feature_pixel_width", "camera_to_target_distance"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise NonPositiveExtent(f"{name} must be strictly positive, got {value}")

    @property
    def angular_extent(self) -> float:
        """Horizontal angle (rad) subtended by one pixel."""
        return math.atan(self.feature_physical_width / self.camera_to_target_distance) / self.feature_pixel_width


@dataclass(frozen=True)
class MagnificationEstimate:
    m: float
    bare_angular_extent: float
    lens_angular_extent: float


@dataclass(frozen=True)
class EffectiveGeometry:
    """Fan-beam geometry of the magnified optical train.

    ``f_eff`` is in pixels, ``pixel_pitch`` and ``axis_distance`` in mm, and the
    principal point in full-sensor pixel coordinates.
    """

    f_eff: float
    pixel_pitch: float
    principal_point: tuple[float, float]
    axis_distance: float

    def __post_init__(self):
        if not (self.f_eff > 0 and self.pixel_pitch > 0 and self.axis_distance > 0):
            raise ConfigError(
                "effective geometry needs f_eff, pixel_pitch and axis_distance > 0, got "
                f"{self.f_eff}, {self.pixel_pitch}, {self.axis_distance}"
            )
        object.__setattr__(self, "principal_point", (float(self.principal_point[0]), float(self.principal_point[1])))

    @property
    def c_x(self) -> float:
        return self.principal_point[0]

    @property
    def c_y(self) -> float:
        return self.principal_point[1]

    @property
    def object_pixel_size(self) -> float:
        """Size (mm) of one detector pixel projected onto the rotation axis."""
        return self.axis_distance / self.f_eff

    def shifted(self, du: float, dv: float) -> "EffectiveGeometry":
        """Geometry expressed in a detector window whose origin is at (du, dv)."""
        return replace(self, principal_point=(self.c_x - du, self.c_y - dv))

    def to_dict(self) -> dict:
        return {
            "f_eff": self.f_eff,
            "pixel_pitch": self.pixel_pitch,
            "principal_point": list(self.principal_point),
            "axis_distance": self.axis_distance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EffectiveGeometry":
        return cls(
            f_eff=float(d["f_eff"]),
            pixel_pitch=float(d["pixel_pitch"]),
            principal_point=tuple(d["principal_point"]),
            axis_distance=float(d["axis_distance"]),
        )


# ---------------------------------------------------------------------------
# calibration steps


def compute_normalization(points) -> NormalizationTransform:
    """Similarity transform taking ``points`` to zero mean, mean norm sqrt(2)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise AllPointsCoincident("normalization needs at least two points")
    centroid = pts.mean(axis=0)
    d_mean = float(np.mean(np.linalg.norm(pts - centroid, axis=1)))
    if not d_mean > 0:
        raise AllPointsCoincident("all points coincide; cannot normalize")
    return NormalizationTransform(math.sqrt(2.0) / d_mean, float(centroid[0]), float(centroid[1]), d_mean)


def _null_vector(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # full_matrices so a wide system still yields the trailing right vectors
    _, s, vt = np.linalg.svd(a, full_matrices=True)
    sv = np.zeros(vt.shape[0])
    sv[: len(s)] = s
    return vt[-1], sv


def estimate_square_homography(obs: SquareObservation) -> Homography:
    """Direct linear transform from the canonical square to ``obs.corners``."""
    rows = []
    for (x, y), (u, v) in zip(CANONICAL_CORNERS, obs.corners):
        rows.append([x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u])
        rows.append([0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, -v])
    a = np.asarray(rows)
    h, sv = _null_vector(a)
    # an 8x9 system has a one-dimensional null space unless corners are degenerate
    if sv[7] <= 1e-10 * sv[0]:
        raise DegenerateCorners("square corners are collinear or coincident")
    hom = Homography(h.reshape(3, 3))
    if abs(np.linalg.det(hom.h)) < 1e-14:
        raise DegenerateCorners("estimated homography is singular")
    return hom


def _conic_row(hi: np.ndarray, hj: np.ndarray) -> np.ndarray:
    # coefficients of hi^T omega hj in (w11, w13, w22, w23, w33)
    return np.array(
        [
            hi[0] * hj[0],
            hi[0] * hj[2] + hi[2] * hj[0],
            hi[1] * hj[1],
            hi[1] * hj[2] + hi[2] * hj[1],
            hi[2] * hj[2],
        ]
    )


def assemble_iac_constraints(hs: Iterable[Homography | np.ndarray]) -> np.ndarray:
    """Stack the orthogonality and equal-norm constraints of every homography.

    Returns an (2 * len(hs), 5) matrix acting on (w11, w13, w22, w23, w33).
    """
    rows = []
    for hom in hs:
        h = hom.h if isinstance(hom, Homography) else np.asarray(hom, dtype=float)
        h1, h2 = h[:, 0], h[:, 1]
        rows.append(_conic_row(h1, h2))
        rows.append(_conic_row(h1, h1) - _conic_row(h2, h2))
    return np.asarray(rows).reshape(-1, 5)


def solve_iac(system: np.ndarray) -> AbsoluteConicImage:
    """Unit-norm least-squares conic, sign fixed so that ``omega[0, 0] > 0``."""
    a = np.asarray(system, dtype=float)
    if a.ndim != 2 or a.shape[1] != 5 or a.shape[0] < 4:
        raise InsufficientConstraints(f"need at least 4 constraint rows, got {a.shape[0] if a.ndim == 2 else 0}")
    w, sv = _null_vector(a)
    if sv[-2] - sv[-1] <= AMBIGUITY_RTOL * sv[0]:
        raise AmbiguousSolution(
            "degenerate plane configuration: the conic is not uniquely determined "
            "(squares must span at least two non-parallel planes)"
        )
    if w[0] < 0:
        w = -w
    return AbsoluteConicImage.from_vector(w, sv)


def recover_intrinsics(omega: AbsoluteConicImage | np.ndarray) -> np.ndarray:
    """Upper-triangular ``K`` with ``K[2, 2] = 1`` such that ``K K^T ~ omega^-1``.

    ``omega = A^T A`` is factored with ``A`` upper triangular, so ``K = A^-1``.
    """
    o = omega.omega if isinstance(omega, AbsoluteConicImage) else np.asarray(omega, dtype=float)
    o = 0.5 * (o + o.T)
    if o[0, 0] < 0:
        o = -o
    try:
        lower = np.linalg.cholesky(o)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(
            "conic is not positive definite; check corner data and plane configuration"
        ) from exc
    a = lower.T
    k = np.linalg.inv(a)
    k /= k[2, 2]
    scale = max(abs(k[0, 0]), abs(k[1, 1]))
    if abs(k[0, 1]) > SKEW_TOL * max(scale, 1.0):
        log.warning("recovered skew %.3g is not negligible; forcing zero", k[0, 1])
    k[0, 1] = 0.0
    k[1, 0] = k[2, 0] = k[2, 1] = 0.0
    return k


def denormalize_intrinsics(k_norm: np.ndarray, t: NormalizationTransform) -> CameraIntrinsics:
    k_norm = np.asarray(k_norm, dtype=float)
    k = t.inverse @ k_norm
    k = k / k[2, 2]
    return CameraIntrinsics.from_matrix(k, normalized_k=k_norm, norm_transform=t)


def calibrate(squares: Sequence[SquareObservation], normalize: bool = True) -> CameraIntrinsics:
    """Estimate zero-skew intrinsics from imaged squares.

    Parameters
    ----------
    squares : sequence of SquareObservation
        At least three squares lying on at least two non-parallel planes.
    normalize : bool, optional
        Condition the corner coordinates with a similarity transform before
        solving. Only affects numerical conditioning.

    Returns
    -------
    CameraIntrinsics
    """
    squares = list(squares)
    if len(squares) < 3:
        raise InsufficientConstraints(f"calibration needs at least 3 squares, got {len(squares)}")
    if len({sq.plane_id for sq in squares}) < 2:
        log.warning("all squares share plane_id %d; the solution may be degenerate", squares[0].plane_id)

    all_points = np.concatenate([sq.corners for sq in squares])
    t = compute_normalization(all_points) if normalize else NormalizationTransform.identity()
    hs = [
        estimate_square_homography(SquareObservation(t.apply(sq.corners), sq.plane_id))
        for sq in squares
    ]
    omega = solve_iac(assemble_iac_constraints(hs))
    k_norm = recover_intrinsics(omega)
    return denormalize_intrinsics(k_norm, t)


def reprojection_residuals(squares: Sequence[SquareObservation], intrinsics: CameraIntrinsics) -> dict:
    """Corner fit and conic-constraint residuals for a calibration report."""
    k = intrinsics.matrix
    kinv = np.linalg.inv(k)
    omega = kinv.T @ kinv
    omega /= np.linalg.norm(omega)
    hs = [estimate_square_homography(sq) for sq in squares]
    a = assemble_iac_constraints(hs)
    conic = a @ AbsoluteConicImage(omega).vector
    # per-square orthonormality error of K^-1 [h1 h2] columns
    ortho = []
    for hom in hs:
        r = kinv @ hom.h
        r1, r2 = r[:, 0], r[:, 1]
        n1, n2 = np.linalg.norm(r1), np.linalg.norm(r2)
        ortho.append(
            {
                "cos_angle": float(abs(r1 @ r2) / (n1 * n2)),
                "norm_ratio": float(n1 / n2),
            }
        )
    return {"conic_rms": float(np.sqrt(np.mean(conic**2))), "squares": ortho}


# ---------------------------------------------------------------------------
# magnification and effective geometry


def usaf_line_width(group: int, element: int) -> float:
    """Bar width in micrometers of a USAF 1951 target group/element."""
    if int(element) != element or not 1 <= element <= 6:
        raise InvalidElement(f"USAF element must be in 1..6, got {element}")
    lp_per_mm = 2.0 ** (group + (element - 1) / 6.0)
    return 1000.0 / (2.0 * lp_per_mm)


def estimate_magnification(bare: TargetMeasurement, with_lens: TargetMeasurement) -> MagnificationEstimate:
    bare_ext = bare.angular_extent
    lens_ext = with_lens.angular_extent
    if not (bare_ext > 0 and lens_ext > 0):
        raise NonPositiveExtent("angular extents must be positive")
    return MagnificationEstimate(bare_ext / lens_ext, bare_ext, lens_ext)


def derive_effective_geometry(
    k: CameraIntrinsics,
    m: MagnificationEstimate | float,
    f_bare_mm: float,
    axis_distance_mm: float,
) -> EffectiveGeometry:
    mag = m.m if isinstance(m, MagnificationEstimate) else float(m)
    if not f_bare_mm > 0:
        raise ConfigError(f"f_bare must be positive, got {f_bare_mm}")
    return EffectiveGeometry(
        f_eff=mag * k.f_x,
        pixel_pitch=f_bare_mm / k.f_x,
        principal_point=(k.c_x, k.c_y),
        axis_distance=axis_distance_mm,
    )


# ---------------------------------------------------------------------------
# corner files

CORNER_COLUMNS = ["plane_id", "u00", "v00", "u10", "v10", "u01", "v01", "u11", "v11"]


def read_corners_csv(path) -> list[SquareObservation]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(CORNER_COLUMNS) - set(reader.fieldnames or [])
            if missing:
                raise DataError(f"{path}: missing columns {sorted(missing)}")
            squares = []
            for lineno, row in enumerate(reader, start=2):
                try:
                    vals = [float(row[c]) for c in CORNER_COLUMNS[1:]]
                    squares.append(SquareObservation(np.reshape(vals, (4, 2)), int(row["plane_id"])))
                except (TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise UnreadableFile(f"cannot read corner file {path}: {exc}") from exc
    return squares


def write_corners_csv(path, squares: Sequence[SquareObservation]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CORNER_COLUMNS)
        for sq in squares:
            writer.writerow([sq.plane_id, *(f"{x:.10g}" for x in sq.corners.ravel())])
