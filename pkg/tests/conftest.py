import sys

import numpy as np
import pytest

from optrecon.synth_phantom import (
    DigitalPhantom,
    PhantomPrimitive,
    default_geometry,
    sphere_cylinder_phantom,
)


@pytest.fixture
def k_true() -> np.ndarray:
    return np.array([[1200.0, 0.0, 640.0], [0.0, 1150.0, 360.0], [0.0, 0.0, 1.0]])


@pytest.fixture
def geometry():
    return default_geometry(cols=256, rows=64)


@pytest.fixture
def small_geometry():
    """128-column detector; field of view radius about 0.32 mm."""
    return default_geometry(cols=128, rows=8)


@pytest.fixture
def centered_disk() -> DigitalPhantom:
    return DigitalPhantom([PhantomPrimitive("disk", (0.0, 0.0, 0.0), (0.5,), mu=1.0)])


@pytest.fixture
def sphere_cylinder() -> DigitalPhantom:
    return sphere_cylinder_phantom()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    results = {}
    for mod in list(sys.modules.values()):
        results.update(getattr(mod, "ACCEPTANCE_RESULTS", None) or {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
