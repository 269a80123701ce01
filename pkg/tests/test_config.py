from __future__ import annotations

import math

import pytest

from pnpqkd.config import ConfigError, ExperimentConfig

BUNDLED = ["alignment", "cable", "fig4", "fig5", "lab", "noiseless", "table1", "table2", "table3"]


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_configs_load(name):
    cfg = ExperimentConfig.bundled(name)
    cfg.link_config()
    cfg.policy()
    assert cfg.source.endswith(f"{name}.ini")


def test_cable_operating_point():
    cfg = ExperimentConfig.bundled("cable")
    assert cfg.eta_t == pytest.approx(10 ** (-1.71), rel=1e-12)
    assert cfg.schedule().capacity_pulses == 191
    assert cfg.schedule().pulses_per_train == 191
    assert cfg.nu_effective() == pytest.approx(507438.89, rel=1e-7)
    assert cfg.qber_opt == pytest.approx(0.00137848143052714, rel=1e-12)


def test_defaults_and_overrides():
    cfg = ExperimentConfig.from_string("""
[link]
mu = 0.2
eta_t = 0.5
qber_opt = 0.01
[protocol]
mu = 0.3
n_slots = 1e6
[train]
pulses_per_train = 10
""")
    assert cfg.mu == 0.3 and cfg.eta_t == 0.5
    assert cfg.protocol.n_slots == 1_000_000
    assert cfg.schedule().pulses_per_train == 10
    assert cfg.optical().qber_opt == pytest.approx(0.01)


def test_curve_parsing():
    cfg = ExperimentConfig.from_string("[detector]\noperating_curve = 0.05:1e-6, 0.1:1e-5\n")
    assert cfg.detector.operating_curve == ((0.05, 1e-6), (0.1, 1e-5))
    assert cfg.detector_model().noise_at(0.1) == pytest.approx(1e-5)


def test_calibrated_backscatter():
    cfg = ExperimentConfig.from_string("[backscatter]\ncalibrate = yes\n[detector]\np_noise = 2e-5\n")
    assert cfg.backscatter_model().noise_per_overlapping_pulse == pytest.approx(1e-6)


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[link]\nnope = 1\n",
    "[link]\nmu = fast\n",
    "[protocol]\nn_slots = 1.5\n",
    "[backscatter]\ncalibrate = maybe\n",
    "[reproduce]\nx = abc\n",
    "no section header",
])
def test_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_string(text)


def test_missing_bundled():
    with pytest.raises(ConfigError):
        ExperimentConfig.bundled("nonexistent")


def test_reference_lookup():
    cfg = ExperimentConfig.from_string("[reproduce]\nlab_raw = 1630\n")
    assert cfg.ref("lab_raw") == 1630
    assert cfg.ref("other", 2.0) == 2.0
    with pytest.raises(ConfigError):
        cfg.ref("other")


def test_alignment_scene():
    cfg = ExperimentConfig.bundled("alignment")
    scene = cfg.scene()
    assert cfg.guess_km == 22.8
    assert len(scene.parasite_reflections) == 3
    assert scene.true_delay_s == pytest.approx(2 * 25.1e3 / 2.04e8)


def test_infinite_extinction_default():
    assert ExperimentConfig().qber_opt == 0.0
    assert math.isinf(ExperimentConfig().link.extinction_db)


def test_load_from_file(tmp_path):
    p = tmp_path / "x.ini"
    p.write_text("[link]\nmu = 0.4\n")
    assert ExperimentConfig.load(p).mu == 0.4
