"""Small synthetic round trip used by ``optrecon selftest``."""

from __future__ import annotations

import time

import numpy as np

from .attenuation import AirMarginSpec, to_attenuation
from .geometry_calib import calibrate
from .synth_phantom import (
    DigitalPhantom,
    PhantomPrimitive,
    SimulationConfig,
    default_geometry,
    rasterize_phantom,
    simulate_acquisition,
    synthetic_calibration_squares,
)
from .synth_phantom import GridSpec
from .tomo_recon import ReconConfig, reconstruct_volume


def run_selftest(emit=print) -> bool:
    """Calibrate noiseless squares and reconstruct a tiny sphere; report pass/fail."""
    ok = True
    t0 = time.perf_counter()

    k_true = np.array([[1400.0, 0, 640.0], [0, 1380.0, 360.0], [0, 0, 1]])
    squares = synthetic_calibration_squares(k_true, noise_px=0.0, rng=np.random.default_rng(0))
    k_est = calibrate(squares).matrix
    err = float(np.max(np.abs(k_est - k_true) / np.abs(k_true).max()))
    passed = err < 1e-6
    ok &= passed
    emit(f"[{'PASS' if passed else 'FAIL'}] calibration, noiseless max relative error {err:.2e}")

    geom = default_geometry(cols=128, rows=4)
    ph = DigitalPhantom([PhantomPrimitive("sphere", (0.0, 0.0, 0.0), (0.15,), mu=1.0)])
    sim = SimulationConfig(geom, rows=4, cols=128, angles_deg=np.arange(180) * 2.0)
    att = to_attenuation(simulate_acquisition(ph, sim), AirMarginSpec(n_left=16, n_right=16, smoothing_window=3))
    vol = reconstruct_volume(att, ReconConfig(n=128))
    truth = rasterize_phantom(ph, GridSpec.from_volume(vol)).values
    rmse = float(np.sqrt(np.mean((vol.values - truth) ** 2)))
    passed = rmse < 0.05 * ph.max_mu()
    ok &= passed
    emit(f"[{'PASS' if passed else 'FAIL'}] reconstruction, sphere RMSE {rmse:.4f} (limit {0.05 * ph.max_mu():.3f})")
    emit(f"selftest {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return ok
