import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from optrecon import __version__
from optrecon.cli import main
from optrecon.geometry_calib import write_corners_csv
from optrecon.raw_ingest import BayerMosaic, read_pgm
from optrecon.synth_phantom import synthetic_calibration_squares
from optrecon.volume import Volume, read_tiff_slices, read_volume, write_volume

CONFIG = """
seed = 5

[paths]
input = "frames"
output = "recon"

[geometry]
f_eff = 10000.0
pixel_pitch = 0.0015
principal_point = [63.5, 3.5]
axis_distance = 50.0

[air]
n_left = 16
n_right = 16
smoothing_window = 3

[recon]
n = 96

[simulation]
rows = 8
cols = 128
n_views = 120
{extra}

[[simulation.primitive]]
shape = "sphere"
radius = 0.15
mu = 1.0
"""


def tree_hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def project(tmp_path):
    def make(extra="", name="run.toml"):
        p = tmp_path / name
        p.write_text(CONFIG.format(extra=extra))
        return p

    return make


@pytest.fixture
def simulated(project):
    cfg = project()
    assert main(["simulate", "--config", str(cfg)]) == 0
    return cfg


# -- calibrate / magnify ---------------------------------------------------------


def test_calibrate(tmp_path, k_true, capsys):
    csv = tmp_path / "corners.csv"
    write_corners_csv(csv, synthetic_calibration_squares(k_true))
    out = tmp_path / "calib" / "camera.json"
    assert main(["calibrate", str(csv), "--out", str(out)]) == 0
    side = json.loads(out.read_text())
    np.testing.assert_allclose(side["K"], k_true, rtol=1e-6)
    assert side["n_squares"] == 13 and side["plane_ids"] == [0, 1, 2]
    assert "f_x = 1199.99" in out.with_suffix(".txt").read_text() or "f_x = 1200.00" in out.with_suffix(".txt").read_text()
    assert "f_y" in capsys.readouterr().out


def test_calibrate_single_plane(tmp_path, k_true, capsys):
    csv = tmp_path / "corners.csv"
    write_corners_csv(csv, synthetic_calibration_squares(k_true, counts=(5,)))
    code = main(["calibrate", str(csv), "--out", str(tmp_path / "c.json")])
    assert code == 4
    assert "degenerate plane configuration" in capsys.readouterr().err


def test_calibrate_missing_file(tmp_path, capsys):
    assert main(["calibrate", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "c.json")]) == 3
    assert "nope.csv" in capsys.readouterr().err


def test_magnify(tmp_path, k_true):
    calib = tmp_path / "camera.json"
    calib.write_text(json.dumps({"K": k_true.tolist()}))
    out = tmp_path / "geometry.json"
    args = ["magnify", "--calibration", str(calib), "--bare", "1,10,500", "--lens", "1,100,500",
            "--f-bare", "4.8", "--axis-distance", "50", "--out", str(out)]
    assert main(args) == 0
    side = json.loads(out.read_text())
    assert side["M"] == pytest.approx(10.0)
    assert side["p"] == pytest.approx(0.004)
    assert side["f_eff"] == pytest.approx(12000.0)
    assert side["effective_geometry"]["principal_point"] == [640.0, 360.0]


def test_magnify_rejects_bad_measurement(tmp_path, k_true):
    calib = tmp_path / "camera.json"
    calib.write_text(json.dumps({"K": k_true.tolist()}))
    args = ["magnify", "--calibration", str(calib), "--bare", "1,0,500", "--lens", "1,100,500",
            "--f-bare", "4.8", "--axis-distance", "50", "--out", str(tmp_path / "g.json")]
    assert main(args) == 3


# -- simulate -----------------------------------------------------------------------


def test_simulate_layout(simulated):
    frames = simulated.parent / "frames"
    lines = (frames / "manifest.csv").read_text().splitlines()
    assert lines[0] == "filename,angle_deg" and len(lines) == 121
    assert json.loads((frames / "capture.json").read_text())["bit_depth"] == 16
    samples, maxval = read_pgm(frames / "frame_0000.pgm")
    assert samples.shape == (8, 128) and maxval == 65535


def test_simulate_empty_phantom_with_vignetting(project):
    cfg = project("vignetting_amplitude = 0.2\ni0 = 0.5")
    text = cfg.read_text()
    cfg.write_text(text[: text.index("[[simulation.primitive]]")])
    assert main(["simulate", "--config", str(cfg)]) == 0
    frames = cfg.parent / "frames"
    g = 1 + 0.2 * np.sin(np.pi * np.arange(8) / 8)
    expected = np.rint(0.5 * g * 65535)[:, None] * np.ones((1, 128))
    for name in ("frame_0000.pgm", "frame_0077.pgm"):
        mosaic = BayerMosaic(read_pgm(frames / name)[0])
        mask = mosaic.green_mask()
        np.testing.assert_array_equal(mosaic.samples[mask], expected[mask])


def test_simulate_seed_reproducible(project, tmp_path):
    a = project("noise_counts = 1000.0", name="a.toml")
    assert main(["simulate", "--config", str(a), "--set", "paths.input='fa'"]) == 0
    assert main(["simulate", "--config", str(a), "--set", "paths.input='fb'"]) == 0
    assert main(["simulate", "--config", str(a), "--set", "paths.input='fc'", "--seed", "6"]) == 0
    ha, hb, hc = (tree_hashes(tmp_path / d) for d in ("fa", "fb", "fc"))
    assert ha == hb
    assert ha["frame_0003.pgm"] != hc["frame_0003.pgm"]


# -- preprocess / reconstruct --------------------------------------------------------


def test_preprocess(simulated):
    assert main(["preprocess", "--config", str(simulated)]) == 0
    out = simulated.parent / "recon"
    att = np.load(out / "attenuation.npy")
    assert att.shape == (8, 128, 120) and att.dtype == np.float32
    assert np.abs(att[:, :16]).max() < 0.01
    assert (out / "incident_field.csv").read_text().startswith("row,0.000000,3.000000")


def test_reconstruct_outputs_and_manifest(simulated):
    assert main(["reconstruct", "--config", str(simulated), "--threads", "2"]) == 0
    out = simulated.parent / "recon"
    vol = read_volume(out / "volume")
    assert vol.shape == (8, 96, 96)
    assert vol.pixel_size == pytest.approx(0.005)
    center = vol.values[3:5, 40:56, 40:56]
    assert abs(center.mean() - 1.0) < 0.05
    man = json.loads((out / "run_manifest.json").read_text())
    assert man["version"] == __version__
    assert man["config"]["seed"] == 5 and man["config"]["recon"]["n"] == 96
    assert set(man["timings_s"]) == {"ingest", "attenuation", "reconstruct", "write"}
    assert man["outputs"]["volume.raw"] == hashlib.sha256((out / "volume.raw").read_bytes()).hexdigest()
    assert len(man["inputs"]) == 122
    assert man["capture"]["pattern"] == "RGGB" and man["capture"]["bit_depth"] == 16


def test_reconstruct_deterministic_across_threads(simulated):
    out = simulated.parent / "recon"
    digests = []
    for threads in ("1", "4", "1"):
        assert main(["reconstruct", "--config", str(simulated), "--threads", threads]) == 0
        digests.append(hashlib.sha256((out / "volume.raw").read_bytes()).hexdigest())
    assert len(set(digests)) == 1


def test_reconstruct_rejects_bad_geometry_before_compute(simulated, capsys):
    code = main(["reconstruct", "--config", str(simulated), "--set", "geometry.axis_distance=0.0"])
    assert code == 2
    assert "axis_distance" in capsys.readouterr().err
    assert not (simulated.parent / "recon").exists()


def test_reconstruct_missing_frame_is_data_error(simulated, capsys):
    (simulated.parent / "frames" / "frame_0010.pgm").unlink()
    assert main(["reconstruct", "--config", str(simulated)]) == 3
    err = capsys.readouterr().err
    assert "during ingest" in err and "frame_0010.pgm" in err


def test_reconstruct_half_scan_is_data_error(simulated, capsys):
    frames = simulated.parent / "frames"
    lines = (frames / "manifest.csv").read_text().splitlines()
    (frames / "manifest.csv").write_text("\n".join(lines[:61]) + "\n")
    assert main(["reconstruct", "--config", str(simulated)]) == 3
    assert "IncompleteScan during reconstruct" in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    assert main(["reconstruct"]) == 2
    assert main(["reconstruct", "--config", str(tmp_path / "none.toml")]) == 2
    assert "cannot read config" in capsys.readouterr().err


# -- export / selftest -----------------------------------------------------------------


def test_export_tiff_and_previews(tmp_path, rng):
    vol = Volume(rng.normal(size=(3, 6, 5)).astype(np.float32), 0.01, 0.01, np.zeros(3))
    write_volume(tmp_path / "v", vol)
    assert main(["export", str(tmp_path / "v"), "--out", str(tmp_path / "t")]) == 0
    tifs = sorted((tmp_path / "t").glob("*.tif"))
    assert len(tifs) == 3
    np.testing.assert_array_equal(read_tiff_slices(tifs), vol.values)
    assert main(["export", str(tmp_path / "v"), "--format", "preview", "--out", str(tmp_path / "p")]) == 0
    prev = read_tiff_slices(sorted((tmp_path / "p").glob("*.tif")))
    assert prev.dtype == np.uint8 and prev.min() == 0 and prev.max() == 255


def test_export_missing_volume(tmp_path):
    assert main(["export", str(tmp_path / "none"), "--out", str(tmp_path / "t")]) == 3


def test_selftest_subprocess():
    res = subprocess.run([sys.executable, "-m", "optrecon", "selftest"], capture_output=True, text=True, timeout=300)
    assert res.returncode == 0, res.stderr
    assert "selftest passed" in res.stdout


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out
