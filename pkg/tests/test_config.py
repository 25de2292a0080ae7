import pytest

from moslabel.config import PipelineConfig, config_from_dict, load_config
from moslabel.errors import ConfigError


def test_defaults_valid():
    config = config_from_dict({})
    config.validate()
    assert config.detect.rho_dyn == 0.35
    assert config.track.max_assoc_dist == 2.0
    assert config.export.train_ratio == 0.68


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError, match="typo_section"):
        config_from_dict({"typo_section": {}})


def test_unknown_section_key_rejected():
    with pytest.raises(ConfigError, match="rho_dynn"):
        config_from_dict({"detect": {"rho_dynn": 0.3}})


def test_out_of_range_rho_dyn_rejected():
    with pytest.raises(ConfigError, match="rho_dyn"):
        config_from_dict({"detect": {"rho_dyn": 1.5}})


def test_bad_ratios_rejected():
    with pytest.raises(ConfigError, match="ratios"):
        config_from_dict({"export": {"train_ratio": 0.5}})


def test_unknown_stage_rejected():
    with pytest.raises(ConfigError, match="stages"):
        config_from_dict({"stages": ["sync", "teleport"]})


def test_yaml_load(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(
        "input_dir: /data\nout_dir: /out\ndetect:\n  rho_dyn: 0.2\ntrack:\n  max_gap: 7\n"
    )
    config = load_config(path)
    assert config.detect.rho_dyn == 0.2
    assert config.track.max_gap == 7
    assert config.input_dir == "/data"


def test_section_hash_tracks_content():
    a = config_from_dict({})
    b = config_from_dict({"detect": {"rho_dyn": 0.2}})
    assert a.section_hash("detect") != b.section_hash("detect")
    assert a.section_hash("track") == b.section_hash("track")
    assert a.section_hash("detect") == config_from_dict({}).section_hash("detect")
