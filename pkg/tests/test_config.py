import json

import numpy as np
import pytest

from optrecon.config import apply_overrides, load_config, parse_override, simulation_from_config
from optrecon.errors import ConfigError
from optrecon.geometry_calib import EffectiveGeometry

BASE = """
seed = 3
threads = 2

[paths]
input = "data"
output = "out"

[geometry]
f_eff = 10000.0
pixel_pitch = 0.0015
principal_point = [63.5, 3.5]
axis_distance = 50.0

[recon]
n = 64
"""


@pytest.fixture
def dataset(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    (d / "manifest.csv").write_text("filename,angle_deg\n")
    (d / "capture.json").write_text("{}")
    return tmp_path


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_resolves_relative_paths(dataset):
    cfg = load_config(write(dataset, BASE))
    assert cfg.input_dir == (dataset / "data").resolve()
    assert cfg.output_dir == (dataset / "out").resolve()
    assert cfg.seed == 3 and cfg.threads == 2
    assert cfg.recon.n == 64
    assert cfg.geometry.object_pixel_size == pytest.approx(0.005)
    snap = cfg.snapshot()
    json.dumps(snap)
    assert snap["recon"]["n"] == 64 and snap["air"]["n_left"] == 40


def test_overrides(dataset):
    cfg = load_config(write(dataset, BASE), ["recon.n=32", "air.n_left=10", "recon.filter=hann"])
    assert cfg.recon.n == 32 and cfg.air.n_left == 10 and cfg.recon.filter == "hann"


def test_parse_override_values():
    assert parse_override("a.b=3") == (["a", "b"], 3)
    assert parse_override("a=[1, 2]") == (["a"], [1, 2])
    assert parse_override("a.c=word") == (["a", "c"], "word")
    with pytest.raises(ConfigError):
        parse_override("novalue")
    with pytest.raises(ConfigError):
        apply_overrides({"seed": 1}, ["seed.x=2"])


@pytest.mark.parametrize(
    "override",
    [
        "geometry.axis_distance=0.0",
        "geometry.axis_distance=-5.0",
        "geometry.f_eff=0",
        "recon.n=4",
        "recon.filter='shepp'",
        "air.smoothing_window=4",
        "threads=0",
        "crop={u0 = -1, v0 = 0, width = 10, height = 4}",
        "recon.bogus=1",
    ],
)
def test_invalid_values_rejected(dataset, override):
    with pytest.raises(ConfigError):
        load_config(write(dataset, BASE), [override])


def test_missing_input(tmp_path):
    with pytest.raises(ConfigError, match="manifest.csv"):
        load_config(write(tmp_path, BASE))
    cfg = load_config(write(tmp_path, BASE), require_input=False)
    assert cfg.input_dir.name == "data"


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.toml")
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "[paths\n"))


def test_geometry_from_file(dataset):
    geo = EffectiveGeometry(9000.0, 0.002, (60.0, 4.0), 40.0)
    (dataset / "geo.json").write_text(json.dumps({"M": 7.5, "effective_geometry": geo.to_dict()}))
    text = BASE.split("[geometry]")[0] + '[geometry]\nfile = "geo.json"\n'
    assert load_config(write(dataset, text)).geometry == geo


def test_geometry_from_calibration(dataset):
    calib = {"K": [[1200.0, 0, 640.0], [0, 1150.0, 360.0], [0, 0, 1]]}
    (dataset / "calib.json").write_text(json.dumps(calib))
    (dataset / "mag.json").write_text(json.dumps({"M": 8.0}))
    text = BASE.split("[geometry]")[0] + (
        '[geometry]\ncalibration = "calib.json"\nmagnification = "mag.json"\nf_bare = 4.2\naxis_distance = 50.0\n'
    )
    g = load_config(write(dataset, text)).geometry
    assert g.f_eff == pytest.approx(9600.0)
    assert g.pixel_pitch == pytest.approx(4.2 / 1200.0)
    assert g.principal_point == (640.0, 360.0)
    with pytest.raises(ConfigError, match="f_bare"):
        load_config(write(dataset, text.replace("f_bare = 4.2\n", "")))


def test_geometry_section_needs_a_form(dataset):
    text = BASE.split("[geometry]")[0] + "[geometry]\nfoo = 1\n"
    with pytest.raises(ConfigError):
        load_config(write(dataset, text))


def test_simulation_block(tmp_path):
    geo = EffectiveGeometry(10000.0, 0.0015, (63.5, 3.5), 50.0)
    sim = {"primitive": [{"shape": "sphere", "radius": 0.2}], "rows": 8, "cols": 128, "n_views": 90}
    ph, cfg = simulation_from_config(sim, geo, tmp_path, seed=4)
    assert len(ph.primitives) == 1
    np.testing.assert_allclose(cfg.angles_deg, np.arange(90) * 4.0)
    assert cfg.seed == 4
    with pytest.raises(ConfigError, match="field of view"):
        simulation_from_config({**sim, "primitive": [{"shape": "sphere", "radius": 0.5}]}, geo, tmp_path, 0)
    with pytest.raises(ConfigError, match="even"):
        simulation_from_config({**sim, "rows": 7}, geo, tmp_path, 0)
    with pytest.raises(ConfigError, match="full scale"):
        simulation_from_config({**sim, "i0": 0.9, "vignetting_amplitude": 0.3}, geo, tmp_path, 0)
    with pytest.raises(ConfigError, match="unknown"):
        simulation_from_config({**sim, "colour": 1}, geo, tmp_path, 0)
    with pytest.raises(ConfigError):
        simulation_from_config(sim, None, tmp_path, 0)
