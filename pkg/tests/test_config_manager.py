import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import json

import pytest

from utils.config_manager import DEFAULT_SECTIONS, RunConfig
from utils.errors import ConfigError
from utils.logger import get_logger

logger = get_logger("TEST_CONFIG_MANAGER")


def test_defaults_fill_every_section():
    config = RunConfig()
    assert config.scenario_name == "wheeler_open"
    assert config.geometry["arm_length"] == 20.0
    assert config.packet["speed"] == 50.0
    assert config.integrator["rtol"] == 1e-8
    assert set(config.to_dict()) == set(DEFAULT_SECTIONS)


def test_partial_sections_are_merged():
    config = RunConfig.from_dict({"ensemble": {"n": 50}, "marker": {"kind": "discrete", "efficiency_sq": 0.5}})
    assert config.ensemble["n"] == 50
    assert config.ensemble["seed"] == DEFAULT_SECTIONS["ensemble"]["seed"]
    assert config.marker["efficiency_sq"] == 0.5


@pytest.mark.parametrize("data", [
    {"optics": {}},
    {"packet": {"colour": "red"}},
    {"packet": {"speed": -1.0}},
    {"packet": {"speed": "fast"}},
    {"scenario": {"name": "wheeler_sideways"}},
    {"marker": {"efficiency_sq": 1.2}},
    {"marker": {"placement_channel": 3}},
    {"marker": {"interaction_position": [1.0]}},
    {"schedule": {"bs2": "sometimes"}},
    {"ensemble": {"n": 0}},
    {"ensemble": {"seed": -4}},
    {"ensemble": {"seed": True}},
    {"ensemble": {"mode": "lattice"}},
    {"integrator": {"show_progress": "yes"}},
    {"output": {"emit": ["movie"]}},
    {"geometry": {"reflection_phase": "1"}},
    {"debug": {"modules": []}},
])
def test_invalid_values_are_rejected(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


def test_scenario_overrides_drop_nulls():
    overrides = RunConfig().scenario_overrides()
    assert set(overrides) == {"geometry", "packet", "marker", "schedule", "ensemble", "integrator"}
    assert "kind" not in overrides["marker"]
    assert "t_c" not in overrides["schedule"]
    assert "t_end" not in overrides["integrator"]


def test_apply_overrides_returns_a_validated_copy():
    config = RunConfig()
    changed = config.apply_overrides(seed=3, n=10, out="elsewhere", emit=["svg"])
    assert changed.ensemble["seed"] == 3
    assert changed.ensemble["n"] == 10
    assert str(changed.output_directory) == "elsewhere"
    assert changed.emit == ("svg",)
    assert config.ensemble["n"] == DEFAULT_SECTIONS["ensemble"]["n"]
    with pytest.raises(ConfigError):
        config.apply_overrides(n=0)


def test_config_hash_tracks_content():
    first = RunConfig.from_dict({"ensemble": {"seed": 1}})
    same = RunConfig.from_dict({"ensemble": {"seed": 1}})
    other = RunConfig.from_dict({"ensemble": {"seed": 2}})
    assert first.config_hash() == same.config_hash()
    assert first.config_hash() != other.config_hash()


def test_save_and_load_round_trip(tmp_path):
    path = tmp_path / "config.json"
    config = RunConfig.from_dict({"scenario": {"name": "essw_spin"}, "marker": {"efficiency_sq": 0.25}})
    config.save_to_file(str(path))
    raw = path.read_bytes()
    assert raw.endswith(b"}\n")
    assert b"\r\n" not in raw
    loaded = RunConfig.load_from_file(str(path))
    assert loaded.to_dict() == config.to_dict()
    assert loaded.config_hash() == config.config_hash()


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load_from_file(str(tmp_path / "absent.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        RunConfig.load_from_file(str(broken))
    listed = tmp_path / "listed.json"
    listed.write_text(json.dumps([1, 2]), encoding="utf-8")
    with pytest.raises(ConfigError):
        RunConfig.load_from_file(str(listed))


def test_shipped_config_matches_defaults():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    shipped = RunConfig.load_from_file(os.path.join(root, "config.json"))
    assert shipped.to_dict() == RunConfig().to_dict()
