"""Incident-field estimation from air margins and the Beer-Lambert transform."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, DimensionMismatch, MarginTooWide
from .geometry_calib import EffectiveGeometry
from .raw_ingest import CropRegion, ProjectionStack

log = logging.getLogger(__name__)

ROW_JUMP_WARNING = 0.2


@dataclass(frozen=True)
class AirMarginSpec:
    n_left: int = 40
    n_right: int = 40
    # a w-row median reads a profile peak (w + 1) // 4 rows off-centre; 5 keeps that to one row
    smoothing_window: int = 5

    def __post_init__(self):
        if self.n_left < 0 or self.n_right < 0 or self.n_left + self.n_right < 1:
            raise DataError(f"air margins must pool at least one column, got {self.n_left}+{self.n_right}")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise DataError(f"smoothing window must be odd and >= 1, got {self.smoothing_window}")


@dataclass
class IncidentField:
    """Reference intensity ``values[v, k]`` per detector row and view."""

    values: np.ndarray
    floor: float

    def image(self, cols: int, k: int) -> np.ndarray:
        """The field of view ``k`` replicated across ``cols`` detector columns."""
        return np.repeat(self.values[:, k : k + 1], cols, axis=1)


@dataclass
class AttenuationStack:
    """Line integrals ``values[v, u, k]``."""

    values: np.ndarray
    angles_deg: np.ndarray
    crop: CropRegion
    geometry: Optional[EffectiveGeometry] = None
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
    def window_geometry(self) -> Optional[EffectiveGeometry]:
        if self.geometry is None:
            return None
        return self.geometry.shifted(self.crop.u0, self.crop.v0)


def moving_median(profile: np.ndarray, window: int) -> np.ndarray:
    """Moving median along axis 0; the window shrinks symmetrically at the ends."""
    prof = np.asarray(profile, dtype=float)
    n = prof.shape[0]
    half = window // 2
    out = np.empty_like(prof)
    for v in range(n):
        h = min(half, v, n - 1 - v)
        out[v] = np.median(prof[v - h : v + h + 1], axis=0)
    return out


def estimate_incident_field(stack: ProjectionStack, spec: AirMarginSpec = AirMarginSpec()) -> IncidentField:
    """Per-row, per-view air median followed by a moving median down the rows."""
    if stack.cols <= spec.n_left + spec.n_right:
        raise MarginTooWide(
            f"air margins {spec.n_left}+{spec.n_right} leave no object columns in a {stack.cols}-column stack"
        )
    air = np.concatenate(
        [stack.values[:, : spec.n_left, :], stack.values[:, stack.cols - spec.n_right :, :]], axis=1
    )
    raw = np.median(air, axis=1)  # (rows, n_angles)
    _warn_row_jumps(raw, stack.angles_deg)
    smooth = moving_median(raw, spec.smoothing_window)
    floor = stack.epsilon_floor
    return IncidentField(np.maximum(smooth, floor), floor)


def _warn_row_jumps(raw: np.ndarray, angles: np.ndarray) -> None:
    if raw.shape[0] < 2:
        return
    ref = np.maximum(np.minimum(raw[1:], raw[:-1]), np.finfo(float).tiny)
    jump = np.abs(np.diff(raw, axis=0)) / ref
    for k in np.flatnonzero(np.any(jump > ROW_JUMP_WARNING, axis=0)):
        log.warning(
            "air median jumps by %.0f%% between adjacent rows at %.3f deg; "
            "the air margins may touch the specimen or tube edge",
            100 * jump[:, k].max(),
            angles[k],
        )


def beer_lambert(stack: ProjectionStack, fld: IncidentField) -> AttenuationStack:
    """``mu = -log(max(I, floor) / I0)``; negative values are kept."""
    if fld.values.shape != (stack.rows, stack.n_angles):
        raise DimensionMismatch(
            f"incident field shape {fld.values.shape} does not match stack rows/views "
            f"{(stack.rows, stack.n_angles)}"
        )
    if np.any(fld.values <= 0):
        raise DataError("incident field must be strictly positive")
    intensity = np.maximum(stack.values, stack.epsilon_floor)
    mu = -np.log(intensity / fld.values[:, None, :])
    return AttenuationStack(
        mu,
        np.asarray(stack.angles_deg, dtype=float).copy(),
        stack.crop,
        geometry=stack.geometry,
        metadata=dict(stack.metadata),
    )


def to_attenuation(stack: ProjectionStack, spec: AirMarginSpec = AirMarginSpec()) -> AttenuationStack:
    return beer_lambert(stack, estimate_incident_field(stack, spec))
