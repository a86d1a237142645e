"""Calibrated optical projection tomography from consumer camera raw frames."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericError, OptReconError  # noqa: E402
from .geometry_calib import EffectiveGeometry, calibrate, derive_effective_geometry  # noqa: E402
from .raw_ingest import ProjectionStack, assemble_stack, demosaic_green  # noqa: E402
from .attenuation import AirMarginSpec, to_attenuation  # noqa: E402
from .tomo_recon import ReconConfig, reconstruct_slice, reconstruct_volume  # noqa: E402
from .volume import Volume, read_volume, write_volume  # noqa: E402

__all__ = [
    "__version__",
    "AirMarginSpec",
    "ConfigError",
    "DataError",
    "EffectiveGeometry",
    "NumericError",
    "OptReconError",
    "ProjectionStack",
    "ReconConfig",
    "Volume",
    "assemble_stack",
    "calibrate",
    "demosaic_green",
    "derive_effective_geometry",
    "read_volume",
    "reconstruct_slice",
    "reconstruct_volume",
    "to_attenuation",
    "write_volume",
]
