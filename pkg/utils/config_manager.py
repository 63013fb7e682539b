import copy
import hashlib
import json
from pathlib import Path
from dataclasses import dataclass, fields
from typing import Dict, Any, Optional

from .errors import ConfigError
from .logger import get_logger

logger = get_logger("CONFIG_MANAGER")

SCENARIO_NAMES = ("wheeler_open", "wheeler_closed", "wheeler_delayed", "essw_spin", "av_pointer")
MARKER_KINDS = ("none", "discrete", "pointer")
BS2_MODES = ("absent", "present", "insert", "remove")
SAMPLING_MODES = ("random", "stratified")
EMIT_FLAGS = ("trajectories", "fields", "svg")
REFLECTION_PHASES = ("i", "-i")

# Defaults per section. A value of None means "use the scenario preset".
DEFAULT_SECTIONS: Dict[str, Dict[str, Any]] = {
    "scenario": {
        "name": "wheeler_open",
    },
    "geometry": {
        "arm_length": 20.0,
        "source_distance": 10.0,
        "detector_distance": 20.0,
        "aperture": 5.0,
        "i2_radius": 3.0,
        "detector_radius": 6.0,
        "bs1_reflectance": 0.5,
        "bs2_reflectance": 0.5,
        "reflection_phase": "i",
    },
    "packet": {
        "sigma0": 1.0,
        "mass": 1.0,
        "speed": 50.0,
        "birth_time": 0.0,
    },
    "marker": {
        "kind": None,
        "efficiency_sq": None,
        "ejection_speed": 400.0,
        "pointer_sigma": 1.0,
        "pointer_mass": 1.0,
        "placement_channel": 2,
        "interaction_position": None,
    },
    "schedule": {
        "bs2": None,
        "t_c": None,
    },
    "ensemble": {
        "n": 1000,
        "seed": 20240601,
        "mode": "random",
    },
    "integrator": {
        "rtol": 1e-8,
        "atol": 1e-10,
        "max_node_retries": 10,
        "sample_dt": 0.01,
        "chunk_size": 250,
        "workers": 1,
        "t_end": None,
        "show_progress": False,
    },
    "output": {
        "directory": "output",
        "emit": ["trajectories", "fields", "svg"],
        "field_time": None,
        "field_resolution": 200,
        "svg_max_trajectories": 200,
    },
    "validate": {
        "n": 600,
        "seed": 7,
        "fd_points": 100,
    },
    "debug": {
        "master_debug": True,
        "log_dir": None,
        "modules": {
            "MAIN": "INFO",
            "CLI": "INFO",
            "CONFIG_MANAGER": "WARN",
            "SCENARIOS": "INFO",
            "PILOTWAVE": "WARN",
            "ORACLE": "INFO",
            "PERFORMANCE": "INFO",
        },
        "external_loggers": {
            "matplotlib": "WARN",
            "matplotlib.font_manager": "ERROR",
        },
    },
}

# Sections whose inner dictionaries are free-form (module names, logger names).
_FREE_FORM_KEYS = {("debug", "modules"), ("debug", "external_loggers")}


@dataclass
class RunConfig:
    """Run configuration"""
    # Which experiment to build
    scenario: Dict[str, Any] = None
    # Interferometer dimensions and splitter settings
    geometry: Dict[str, Any] = None
    # Source packet
    packet: Dict[str, Any] = None
    # Which-way marker
    marker: Dict[str, Any] = None
    # Second splitter schedule
    schedule: Dict[str, Any] = None
    # Ensemble size, seed and sampling mode
    ensemble: Dict[str, Any] = None
    # ODE integration settings
    integrator: Dict[str, Any] = None
    # Output directory and emit flags
    output: Dict[str, Any] = None
    # Oracle suite settings
    validate: Dict[str, Any] = None
    # Debug settings
    debug: Dict[str, Any] = None

    def __post_init__(self):
        """Fill missing sections and keys with defaults, then validate"""
        for section in fields(self):
            given = getattr(self, section.name)
            merged = copy.deepcopy(DEFAULT_SECTIONS[section.name])
            if given is not None:
                if not isinstance(given, dict):
                    raise ConfigError(f"section '{section.name}' must be an object")
                for key, value in given.items():
                    if key not in merged:
                        raise ConfigError(f"unknown key '{section.name}.{key}'")
                    merged[key] = copy.deepcopy(value)
            setattr(self, section.name, merged)
        self.validate_values()

    # Convenience accessors
    @property
    def scenario_name(self) -> str:
        return self.scenario["name"]

    @property
    def output_directory(self) -> Path:
        return Path(self.output["directory"])

    @property
    def emit(self) -> tuple:
        return tuple(self.output["emit"])

    def validate_values(self):
        """Reject values of the wrong type or outside their domain"""
        if self.scenario["name"] not in SCENARIO_NAMES:
            raise ConfigError(f"unknown scenario '{self.scenario['name']}', expected one of {SCENARIO_NAMES}")

        for key in ("arm_length", "source_distance", "detector_distance", "aperture",
                    "i2_radius", "detector_radius"):
            _require_positive("geometry", key, self.geometry[key])
        for key in ("bs1_reflectance", "bs2_reflectance"):
            _require_range("geometry", key, self.geometry[key], 0.0, 1.0)
        if self.geometry["reflection_phase"] not in REFLECTION_PHASES:
            raise ConfigError(f"geometry.reflection_phase must be one of {REFLECTION_PHASES}")

        for key in ("sigma0", "mass", "speed"):
            _require_positive("packet", key, self.packet[key])
        _require_number("packet", "birth_time", self.packet["birth_time"])

        marker = self.marker
        if marker["kind"] is not None and marker["kind"] not in MARKER_KINDS:
            raise ConfigError(f"marker.kind must be one of {MARKER_KINDS}")
        if marker["efficiency_sq"] is not None:
            _require_range("marker", "efficiency_sq", marker["efficiency_sq"], 0.0, 1.0)
        for key in ("ejection_speed", "pointer_sigma", "pointer_mass"):
            _require_positive("marker", key, marker[key])
        if marker["placement_channel"] not in (1, 2):
            raise ConfigError("marker.placement_channel must be 1 or 2")
        position = marker["interaction_position"]
        if position is not None:
            if (not isinstance(position, (list, tuple)) or len(position) != 2
                    or not all(_is_number(v) for v in position)):
                raise ConfigError("marker.interaction_position must be null or a list of two numbers")

        if self.schedule["bs2"] is not None and self.schedule["bs2"] not in BS2_MODES:
            raise ConfigError(f"schedule.bs2 must be one of {BS2_MODES}")
        if self.schedule["t_c"] is not None:
            _require_number("schedule", "t_c", self.schedule["t_c"])

        _require_count("ensemble", "n", self.ensemble["n"])
        _require_integer("ensemble", "seed", self.ensemble["seed"])
        if self.ensemble["seed"] < 0:
            raise ConfigError("ensemble.seed must be non-negative")
        if self.ensemble["mode"] not in SAMPLING_MODES:
            raise ConfigError(f"ensemble.mode must be one of {SAMPLING_MODES}")

        for key in ("rtol", "atol", "sample_dt"):
            _require_positive("integrator", key, self.integrator[key])
        for key in ("max_node_retries", "chunk_size", "workers"):
            _require_count("integrator", key, self.integrator[key])
        if self.integrator["t_end"] is not None:
            _require_positive("integrator", "t_end", self.integrator["t_end"])
        if not isinstance(self.integrator["show_progress"], bool):
            raise ConfigError("integrator.show_progress must be true or false")

        if not isinstance(self.output["directory"], str) or not self.output["directory"]:
            raise ConfigError("output.directory must be a non-empty string")
        emit = self.output["emit"]
        if not isinstance(emit, list) or any(flag not in EMIT_FLAGS for flag in emit):
            raise ConfigError(f"output.emit must be a list drawn from {EMIT_FLAGS}")
        if self.output["field_time"] is not None:
            _require_number("output", "field_time", self.output["field_time"])
        _require_count("output", "field_resolution", self.output["field_resolution"])
        _require_count("output", "svg_max_trajectories", self.output["svg_max_trajectories"])

        _require_count("validate", "n", self.validate["n"])
        _require_integer("validate", "seed", self.validate["seed"])
        _require_count("validate", "fd_points", self.validate["fd_points"])

        if not isinstance(self.debug["master_debug"], bool):
            raise ConfigError("debug.master_debug must be true or false")
        for section, key in _FREE_FORM_KEYS:
            if not isinstance(getattr(self, section)[key], dict):
                raise ConfigError(f"{section}.{key} must be an object")

    def scenario_overrides(self) -> Dict[str, Dict[str, Any]]:
        """Sections consumed by scenarios.build, with null values dropped"""
        overrides = {}
        for section in ("geometry", "packet", "marker", "schedule", "ensemble", "integrator"):
            overrides[section] = {k: v for k, v in getattr(self, section).items() if v is not None}
        return overrides

    def apply_overrides(self, seed: Optional[int] = None, n: Optional[int] = None,
                        out: Optional[str] = None, emit: Optional[list] = None) -> 'RunConfig':
        """Return a copy with command-line overrides applied and validated"""
        data = self.to_dict()
        if seed is not None:
            data["ensemble"]["seed"] = seed
        if n is not None:
            data["ensemble"]["n"] = n
        if out is not None:
            data["output"]["directory"] = out
        if emit is not None:
            data["output"]["emit"] = list(emit)
        return RunConfig.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        """Sections in declaration order, keys in default order"""
        result = {}
        for section in fields(self):
            values = getattr(self, section.name)
            ordered = {key: copy.deepcopy(values[key]) for key in DEFAULT_SECTIONS[section.name]}
            result[section.name] = ordered
        return result

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        """Build a config from parsed JSON, rejecting unknown sections"""
        if not isinstance(data, dict):
            raise ConfigError("configuration root must be an object")
        known = {section.name for section in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        return cls(**{name: data.get(name) for name in known})

    @classmethod
    def load_from_file(cls, config_path: str = 'config.json') -> 'RunConfig':
        """Load configuration from JSON file"""
        path = Path(config_path)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                config_data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON in {path}: {e}") from e
        except OSError as e:
            raise ConfigError(f"cannot read {path}: {e}") from e

        config = cls.from_dict(config_data)
        logger.debug(f"Loaded configuration from {path} (hash {config.config_hash()[:12]})")
        return config

    def save_to_file(self, config_path: str = 'config.json'):
        """Save configuration to JSON file"""
        try:
            with open(config_path, 'w', encoding='utf-8', newline='\n') as f:
                json.dump(self.to_dict(), f, indent=4)
                f.write("\n")
        except OSError as e:
            logger.error(f"Failed to save config to {config_path}: {e}")
            raise ConfigError(f"cannot write {config_path}: {e}") from e


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _require_number(section: str, key: str, value):
    if not _is_number(value):
        raise ConfigError(f"{section}.{key} must be a number, got {value!r}")


def _require_positive(section: str, key: str, value):
    _require_number(section, key, value)
    if not value > 0:
        raise ConfigError(f"{section}.{key} must be positive, got {value!r}")


def _require_range(section: str, key: str, value, low: float, high: float):
    _require_number(section, key, value)
    if not low <= value <= high:
        raise ConfigError(f"{section}.{key} must lie in [{low}, {high}], got {value!r}")


def _require_integer(section: str, key: str, value):
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")


def _require_count(section: str, key: str, value):
    _require_integer(section, key, value)
    if value < 1:
        raise ConfigError(f"{section}.{key} must be at least 1, got {value!r}")
