"""
Named experiments and the end-to-end ensemble run.

A scenario fixes the layout, the second-splitter schedule, the marker and the
ensemble. ``run`` integrates the ensemble, classifies every trajectory and
aggregates the counts into a report.
"""
import copy
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy
from scipy.optimize import brentq

from . import marker as markers
from .config_manager import RunConfig
from .errors import ConfigError, RunFailure, ScheduleError, SimulationError
from .logger import get_logger, log_run_event
from .marker import MarkerBeable, MarkerKind, MarkerLabel, MarkerModel
from .optics import (ALWAYS, NEVER, BranchTimeline, Geometry, Layout, ballistic_detector,
                     build_mach_zehnder, source_packet)
from .performance_monitor import monitor_function
from .pilotwave import (GuidanceField, IntegratorSettings, Trajectory, beable_code, build_guidance_field,
                        integrate_ensemble, sample_ensemble)

logger = get_logger("SCENARIOS")

SCENARIO_SECTIONS = ("geometry", "packet", "marker", "schedule", "ensemble", "integrator")

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "wheeler_open": {"marker": {"kind": "none"}, "schedule": {"bs2": "absent"}},
    "wheeler_closed": {"marker": {"kind": "none"}, "schedule": {"bs2": "present"}},
    "wheeler_delayed": {"marker": {"kind": "none"}, "schedule": {"bs2": "insert"}},
    "essw_spin": {"marker": {"kind": "discrete", "efficiency_sq": 1.0}, "schedule": {"bs2": "absent"}},
    "av_pointer": {"marker": {"kind": "pointer"}, "schedule": {"bs2": "absent"}},
}

# Shorthand build() parameters and the config entries they set.
PARAMETER_KEYS = {
    "t_c": ("schedule", "t_c"),
    "direction": ("schedule", "bs2"),
    "a2": ("marker", "efficiency_sq"),
    "ejection_speed": ("marker", "ejection_speed"),
    "pointer_sigma": ("marker", "pointer_sigma"),
    "pointer_mass": ("marker", "pointer_mass"),
    "n": ("ensemble", "n"),
    "seed": ("ensemble", "seed"),
}

# Transit windows extend this many packet widths beyond the I2 radius.
WINDOW_WIDTHS = 5.0
# Largest tolerated fraction of flagged (node-degenerate or unterminated) trajectories.
FLAG_BUDGET = 0.01
# Largest configuration difference two schedules may show before I2.
PREFIX_TOLERANCE = 1e-8


@dataclass(frozen=True)
class Bs2Schedule:
    mode: str = "absent"
    t_c: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("absent", "present", "insert", "remove"):
            raise ConfigError(f"unknown BS2 schedule '{self.mode}'")
        if self.mode in ("insert", "remove") and self.t_c is None:
            raise ConfigError(f"BS2 schedule '{self.mode}' needs a switching time t_c")

    def active_interval(self) -> Tuple[float, float]:
        if self.mode == "present":
            return ALWAYS
        if self.mode == "absent":
            return NEVER
        if self.mode == "insert":
            return (float(self.t_c), math.inf)
        return (-math.inf, float(self.t_c))


@dataclass(frozen=True)
class EnsembleSettings:
    n: int = 1000
    seed: int = 20240601
    mode: str = "random"


@dataclass(frozen=True)
class Scenario:
    name: str
    layout: Layout
    marker: MarkerModel
    bs2_schedule: Bs2Schedule
    ensemble: EnsembleSettings
    integrator: IntegratorSettings
    t_end: float
    config: RunConfig = field(default=None, compare=False, repr=False)

    def guidance_field(self, t_end: Optional[float] = None) -> GuidanceField:
        return build_guidance_field(self.layout, self.marker, self.t_end if t_end is None else t_end)


@dataclass
class TrajectoryRecord:
    index: int
    initial: Tuple[float, ...]
    channel: Optional[int]
    detector: Optional[str]
    terminal_time: Optional[float]
    marker: str
    swap_class: str
    crossed: bool
    flags: Tuple[str, ...]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "initial": [float(v) for v in self.initial],
            "channel": self.channel,
            "detector": self.detector,
            "terminal_time": None if self.terminal_time is None else float(self.terminal_time),
            "marker": self.marker,
            "class": self.swap_class,
            "crossed": self.crossed,
            "flags": list(self.flags),
        }


@dataclass
class RunReport:
    scenario: str
    status: str
    provenance: Dict[str, Any]
    aggregates: Dict[str, Any]
    records: List[TrajectoryRecord]
    trajectories: List[Trajectory] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scenario": self.scenario,
            "status": self.status,
            "provenance": self.provenance,
            "aggregates": self.aggregates,
            "records": [record.to_dict() for record in self.records],
        }

    def save_to_file(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.to_dict(), f, indent=4)
            f.write("\n")


def _merge_sections(target: Dict[str, Dict[str, Any]], source: Optional[Dict[str, Dict[str, Any]]]):
    for section, values in (source or {}).items():
        if section not in SCENARIO_SECTIONS:
            raise ConfigError(f"unknown override section '{section}'")
        if not isinstance(values, dict):
            raise ConfigError(f"override section '{section}' must be an object")
        for key, value in values.items():
            if value is not None:
                target[section][key] = copy.deepcopy(value)


def _default_interaction_position(geometry: Geometry, channel: int) -> Tuple[float, float]:
    """Midpoint of the channel's last leg before I2."""
    L = geometry.arm_length
    return (L / 2.0, L) if channel == 2 else (L, L / 2.0)


def build(name: str, overrides: Optional[Dict[str, Dict[str, Any]]] = None, **params) -> Scenario:
    """
    Build a named scenario.

    Args:
        name: One of wheeler_open, wheeler_closed, wheeler_delayed, essw_spin, av_pointer
        overrides: Config sections (geometry, packet, marker, schedule, ensemble,
            integrator) whose non-null values replace the preset
        **params: Shorthands t_c, direction, a2, ejection_speed, pointer_sigma,
            pointer_mass, n, seed

    Raises:
        ConfigError: Unknown scenario, parameter or invalid value
        ScheduleError: t_c inside an I2 transit window
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown scenario '{name}', expected one of {tuple(PRESETS)}")
    sections: Dict[str, Dict[str, Any]] = {section: {} for section in SCENARIO_SECTIONS}
    _merge_sections(sections, PRESETS[name])
    _merge_sections(sections, overrides)
    for key, value in params.items():
        if key not in PARAMETER_KEYS:
            raise ConfigError(f"unknown scenario parameter '{key}'")
        if value is not None:
            section, entry = PARAMETER_KEYS[key]
            sections[section][entry] = value
    config = RunConfig.from_dict({"scenario": {"name": name}, **sections})

    g = config.geometry
    geometry = Geometry(arm_length=g["arm_length"], source_distance=g["source_distance"],
                        detector_distance=g["detector_distance"], aperture=g["aperture"],
                        i2_radius=g["i2_radius"], detector_radius=g["detector_radius"])
    p = config.packet
    source = source_packet(geometry, p["sigma0"], p["mass"], p["speed"], p["birth_time"])

    schedule = Bs2Schedule(config.schedule["bs2"] or "absent", config.schedule["t_c"])
    m = config.marker
    kind = MarkerKind(m["kind"] or "none")
    position = m["interaction_position"] or _default_interaction_position(geometry, m["placement_channel"])
    efficiency_sq = 1.0 if m["efficiency_sq"] is None else float(m["efficiency_sq"])
    model = MarkerModel(kind=kind, efficiency_sq=efficiency_sq, ejection_speed=m["ejection_speed"],
                        pointer_sigma=m["pointer_sigma"], pointer_mass=m["pointer_mass"],
                        placement_channel=m["placement_channel"], interaction_position=tuple(position),
                        birth_time=p["birth_time"])

    reflection_factor = 1j if g["reflection_phase"] == "i" else -1j
    layout = build_mach_zehnder(geometry, source, bs2_interval=schedule.active_interval(),
                                reflection_factor=reflection_factor,
                                bs1_reflectance=g["bs1_reflectance"], bs2_reflectance=g["bs2_reflectance"],
                                initial_label=model.initial_label)

    if schedule.mode in ("insert", "remove"):
        for channel, (start, end) in i2_transit_windows(layout).items():
            if start <= schedule.t_c <= end:
                raise ScheduleError(f"t_c={schedule.t_c} lies inside the channel-{channel} I2 transit "
                                    f"window [{start:.6f}, {end:.6f}]")

    horizon = layout.horizon()
    timeline = BranchTimeline(layout, horizon)
    if kind != MarkerKind.NONE:
        model = model.resolved(markers.interaction_time(model, timeline))

    t_end = config.integrator["t_end"]
    if t_end is None:
        arrivals = [event.time for branch in timeline.final_branches() for event in branch.history
                    if event.outcome == "absorbed"]
        if not arrivals:
            raise SimulationError("no branch reaches a detector")
        t_end = min(max(arrivals) + 2.0 * geometry.detector_radius / source.speed, horizon)

    i = config.integrator
    integrator = IntegratorSettings(rtol=i["rtol"], atol=i["atol"], max_node_retries=i["max_node_retries"],
                                    sample_dt=i["sample_dt"], chunk_size=i["chunk_size"],
                                    workers=i["workers"], show_progress=i["show_progress"])
    e = config.ensemble
    ensemble = EnsembleSettings(n=e["n"], seed=e["seed"], mode=e["mode"])
    logger.debug(f"built {name}: bs2={schedule.mode} t_c={schedule.t_c} marker={kind.value} t_end={t_end:.4f}")
    return Scenario(name, layout, model, schedule, ensemble, integrator, float(t_end), config)


def i2_transit_windows(layout: Layout) -> Dict[int, Tuple[float, float]]:
    """
    Per channel, the time interval during which its packet center lies within
    the I2 radius plus five packet widths of the I2 center.

    Computed with the second splitter present; the windows do not depend on
    the schedule.
    """
    splitters = layout.splitters
    present = layout
    for splitter in splitters[1:]:
        present = present.with_element(splitter.name, active_interval=ALWAYS)
    geometry = layout.geometry
    center = geometry.i2_center
    timeline = BranchTimeline(present, present.horizon())

    windows: Dict[int, List[float]] = {}
    for branch, start, end in timeline.branch_segments():
        channel = branch.channel
        if channel is None or branch.detector is not None or end <= start:
            continue
        packet = branch.packet

        def margin(t):
            return float(np.linalg.norm(packet.center_at(t) - center)) - (
                geometry.i2_radius + WINDOW_WIDTHS * packet.width_at(t))

        times = np.linspace(start, end, 2001)
        values = np.array([margin(t) for t in times])
        inside = values <= 0
        if not np.any(inside):
            continue
        first = int(np.argmax(inside))
        last = len(inside) - 1 - int(np.argmax(inside[::-1]))
        t_in = times[first] if first == 0 else _root(margin, times[first - 1], times[first])
        t_out = times[last] if last == len(times) - 1 else _root(margin, times[last], times[last + 1])
        low, high = windows.get(channel, [math.inf, -math.inf])
        windows[channel] = [min(low, t_in), max(high, t_out)]
    return {channel: (bounds[0], bounds[1]) for channel, bounds in sorted(windows.items())}


def _root(f, a: float, b: float) -> float:
    return float(brentq(f, a, b, xtol=1e-13))


def classify_swap(trajectory: Trajectory, layout: Layout,
                  ballistic: Optional[Dict[int, Optional[str]]] = None) -> str:
    """'straight' if the particle reached its channel's ballistic detector, 'swap' if the other one."""
    if trajectory.terminal is None or trajectory.channel is None:
        return "unclassified"
    if ballistic is None:
        expected = ballistic_detector(layout, trajectory.channel)
    else:
        expected = ballistic.get(trajectory.channel)
    if expected is None:
        return "unclassified"
    return "straight" if trajectory.terminal == expected else "swap"


def crossing(trajectory: Trajectory, geometry: Geometry, neighborhood: float) -> bool:
    """
    Whether the particle ends on the other side of the symmetry axis through
    I2 than it was on when entering the I2 neighborhood.
    """
    points = trajectory.particle
    distance = np.linalg.norm(points - geometry.i2_center, axis=1)
    inside = np.flatnonzero(distance <= neighborhood)
    if inside.size == 0:
        return False
    entry = points[max(inside[0] - 1, 0)]
    side_in = geometry.axis_side(entry)
    side_out = geometry.axis_side(points[-1])
    return bool(side_in * side_out < 0)


def _neighborhood(layout: Layout, windows: Dict[int, Tuple[float, float]]) -> float:
    geometry = layout.geometry
    if not windows:
        return geometry.i2_radius
    t_mid = np.mean([0.5 * (a + b) for a, b in windows.values()])
    return geometry.i2_radius + WINDOW_WIDTHS * layout.source.width_at(max(t_mid, layout.source.birth_time))


def _fraction(numerator: int, denominator: int) -> Optional[float]:
    return None if denominator == 0 else numerator / denominator


@monitor_function("scenarios.run",
                  context=lambda scenario, *args, **kwargs: {"scenario": scenario.name, "n": scenario.ensemble.n})
def run(scenario: Scenario, workers: Optional[int] = None) -> RunReport:
    """
    Integrate the scenario's ensemble and aggregate the outcomes.

    Raises:
        RunFailure: More than 1 % of the trajectories were flagged, either
            node-degenerate or unterminated at t_end; the failed report is
            attached to the exception
    """
    settings = scenario.integrator
    if workers is not None:
        settings = replace(settings, workers=workers)
    layout = scenario.layout
    model = scenario.marker
    log_run_event("RUN_START", scenario.name, n=scenario.ensemble.n, seed=scenario.ensemble.seed)

    guidance = scenario.guidance_field()
    pointer_packet = markers.unfired_packet(model) if model.has_pointer else None
    initial = sample_ensemble(layout.source, scenario.ensemble.n, scenario.ensemble.seed,
                              scenario.ensemble.mode, pointer_packet)
    trajectories = integrate_ensemble(guidance, initial, scenario.ensemble.seed, settings)

    ballistic = {channel: ballistic_detector(layout, channel) for channel in (1, 2)}
    windows = i2_transit_windows(layout)
    neighborhood = _neighborhood(layout, windows)
    records = []
    for trajectory in trajectories:
        records.append(TrajectoryRecord(
            index=trajectory.index,
            initial=tuple(trajectory.configurations()[0]),
            channel=trajectory.channel,
            detector=trajectory.terminal,
            terminal_time=trajectory.terminal_time,
            marker=trajectory.marker_outcome,
            swap_class=classify_swap(trajectory, layout, ballistic),
            crossed=crossing(trajectory, layout.geometry, neighborhood),
            flags=trajectory.flags,
        ))

    aggregates = _aggregate(records, model, [d.label for d in layout.detectors])
    provenance = _provenance(scenario, settings, windows)
    flagged = aggregates["flagged"]
    status = "ok"
    if flagged > FLAG_BUDGET * len(records):
        status = "failed"
    report = RunReport(scenario.name, status, provenance, aggregates, records, trajectories)
    log_run_event("RUN_END", scenario.name, status=status, P_D1=aggregates["P"].get("D1"),
                  P_D2=aggregates["P"].get("D2"), flagged=flagged)
    if status == "failed":
        raise RunFailure(f"{flagged} of {len(records)} trajectories were flagged "
                         f"({aggregates['node_flagged']} node-degenerate, {aggregates['unterminated']} unterminated)",
                         report)
    return report


def _aggregate(records: List[TrajectoryRecord], model: MarkerModel, detectors: List[str]) -> Dict[str, Any]:
    usable = [r for r in records if "node_degenerate" not in r.flags]
    terminated = [r for r in usable if r.detector is not None]
    unterminated = len(usable) - len(terminated)
    counts = Counter(r.detector for r in terminated)
    detector_counts = {label: counts.get(label, 0) for label in detectors}

    joint: Dict[str, Dict[str, int]] = {}
    if model.kind != MarkerKind.NONE:
        outcomes = ("up", "down") if model.kind == MarkerKind.DISCRETE else ("unfired", "fired")
        for label in detectors:
            joint[label] = {o: sum(1 for r in terminated if r.detector == label and r.marker == o)
                            for o in outcomes}

    straight = {}
    channel_counts = {}
    for channel in (1, 2):
        members = [r for r in terminated if r.channel == channel]
        channel_counts[f"channel_{channel}"] = len(members)
        straight[f"channel_{channel}"] = _fraction(sum(r.swap_class == "straight" for r in members), len(members))

    violations = 0
    if model.kind != MarkerKind.NONE:
        violations = sum(1 for r in usable if markers.is_excited(r.marker)
                         and r.channel is not None and r.channel != model.placement_channel)

    return {
        "n": len(records),
        "terminated": len(terminated),
        "unterminated": unterminated,
        "node_flagged": len(records) - len(usable),
        "flagged": len(records) - len(terminated),
        "detector_counts": detector_counts,
        "P": {label: _fraction(count, len(terminated)) for label, count in detector_counts.items()},
        "joint_counts": joint,
        "channel_counts": channel_counts,
        "straight_fraction": straight,
        "crossings": sum(1 for r in terminated if r.crossed),
        "locality_violations": violations,
    }


def _provenance(scenario: Scenario, settings: IntegratorSettings,
                windows: Dict[int, Tuple[float, float]]) -> Dict[str, Any]:
    model = scenario.marker
    return {
        "scenario": scenario.name,
        "seed": scenario.ensemble.seed,
        "n": scenario.ensemble.n,
        "sampling": scenario.ensemble.mode,
        "config_hash": scenario.config.config_hash() if scenario.config is not None else None,
        "parameters": scenario.config.scenario_overrides() if scenario.config is not None else {},
        "bs2_schedule": {"mode": scenario.bs2_schedule.mode, "t_c": scenario.bs2_schedule.t_c},
        "marker_interaction_time": model.interaction_time,
        "i2_transit_windows": {f"channel_{c}": [w[0], w[1]] for c, w in windows.items()},
        "t_end": scenario.t_end,
        "integrator": {"method": settings.method, "rtol": settings.rtol, "atol": settings.atol,
                       "sample_dt": settings.sample_dt, "chunk_size": settings.chunk_size},
        "versions": {"numpy": np.__version__, "scipy": scipy.__version__},
    }


@dataclass
class PrefixComparison:
    """Two schedules integrated from the same initial conditions."""
    prefix_deviation: float
    late_deviation: float
    t_prefix: float
    diverged: int


def delayed_choice_prefix_check(scenario_a: Scenario, scenario_b: Scenario,
                                n: Optional[int] = None) -> PrefixComparison:
    """
    Integrate both scenarios over their full windows from the same initial
    conditions and compare the records.

    ``prefix_deviation`` is the largest configuration difference at common
    sample times before the trajectory's channel enters its I2 transit window
    (the first window when the channel is unknown). ``late_deviation`` is the
    largest difference afterwards, and ``diverged`` counts trajectories that
    end at different detectors or differ by more than the prefix tolerance
    after the window opens. Both scenarios must share the source, the
    ensemble seed and the sampling mode.
    """
    if scenario_a.layout.source != scenario_b.layout.source or scenario_a.ensemble != scenario_b.ensemble:
        raise SimulationError("prefix check needs scenarios with the same source and ensemble")
    windows = i2_transit_windows(scenario_a.layout)
    t_first = min(start for start, _ in windows.values())
    size = n or scenario_a.ensemble.n
    ensemble = scenario_a.ensemble
    pointer_packet = markers.unfired_packet(scenario_a.marker) if scenario_a.marker.has_pointer else None
    initial = sample_ensemble(scenario_a.layout.source, size, ensemble.seed, ensemble.mode, pointer_packet)

    runs = [integrate_ensemble(scenario.guidance_field(), initial, ensemble.seed, scenario.integrator)
            for scenario in (scenario_a, scenario_b)]
    prefix = 0.0
    late = 0.0
    diverged = 0
    for first, second in zip(*runs):
        cutoff = windows.get(first.channel, (t_first, None))[0]
        common, i, j = np.intersect1d(first.times, second.times, return_indices=True)
        diff = np.max(np.abs(first.configurations()[i] - second.configurations()[j]), axis=1)
        before = common < cutoff
        if np.any(before):
            prefix = max(prefix, float(diff[before].max()))
        after = float(diff[~before].max()) if np.any(~before) else 0.0
        late = max(late, after)
        if first.terminal != second.terminal or after > PREFIX_TOLERANCE:
            diverged += 1
    logger.info(f"delayed-choice comparison: prefix deviation {prefix:.3g} before t={t_first:.6f}, "
                f"late deviation {late:.3g}, {diverged} of {size} trajectories diverged")
    return PrefixComparison(prefix, late, t_first, diverged)


def default_field_time(scenario: Scenario) -> float:
    """Middle of the I2 overlap."""
    windows = i2_transit_windows(scenario.layout)
    return float(np.mean([0.5 * (a + b) for a, b in windows.values()]))


def resolve_field_time(scenario: Scenario, requested: Optional[float] = None) -> float:
    """
    Time of the field map: ``requested``, or the middle of the I2 overlap.

    Raises:
        ConfigError: ``requested`` lies outside [birth, t_end]
    """
    if requested is None:
        return default_field_time(scenario)
    birth = scenario.layout.source.birth_time
    if not birth <= requested <= scenario.t_end:
        raise ConfigError(f"output.field_time={requested} outside [{birth}, {scenario.t_end:.4f}]")
    return float(requested)


def reference_beable(scenario: Scenario, t: float) -> MarkerBeable:
    """Beable used for field maps: marker up, or the pointer at the unfired center."""
    model = scenario.marker
    if model.kind == MarkerKind.DISCRETE:
        if model.interaction_time is not None and t >= model.interaction_time:
            return MarkerBeable(discrete_value=MarkerLabel.UP, interacted=True)
        return MarkerBeable()
    if model.kind == MarkerKind.POINTER:
        return MarkerBeable(pointer_position=float(markers.unfired_packet(model).center_at(t)[0]))
    return MarkerBeable()


def field_grid(scenario: Scenario, t: float, resolution: int = 200,
               beable: Optional[MarkerBeable] = None) -> Dict[str, np.ndarray]:
    """
    Quantum potential Q and density R^2 of the conditional wave on a square
    grid covering every live packet at time t. Q is NaN at nodes.
    """
    if not scenario.layout.source.birth_time <= t <= scenario.t_end:
        raise SimulationError(f"field time {t} outside [{scenario.layout.source.birth_time}, {scenario.t_end}]")
    guidance = scenario.guidance_field()
    branches = [b for b in guidance.branches(t) if b.detector is None] or list(guidance.branches(t))
    beable = beable or reference_beable(scenario, t)

    centers = np.array([b.packet.center_at(t) for b in branches])
    reach = 5.0 * max(b.packet.width_at(t) for b in branches)
    low = centers.min(axis=0) - reach
    high = centers.max(axis=0) + reach
    span = float(max(high - low))
    middle = 0.5 * (low + high)
    xs = np.linspace(middle[0] - span / 2, middle[0] + span / 2, resolution)
    ys = np.linspace(middle[1] - span / 2, middle[1] + span / 2, resolution)
    X, Y = np.meshgrid(xs, ys)
    q = np.column_stack([X.ravel(), Y.ravel()])
    if guidance.has_pointer:
        q = np.column_stack([q, np.full(q.shape[0], beable.pointer_position)])
    codes = np.full(q.shape[0], beable_code(beable))
    Q, _ = guidance.quantum_potentials(q, codes, t, branches)
    psi = guidance.jet(q, codes, t, branches)[0]
    return {"x": X.ravel(), "y": Y.ravel(), "Q": Q, "R2": np.abs(psi) ** 2}
