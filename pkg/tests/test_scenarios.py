import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import json
import math

import numpy as np
import pytest

from utils import oracle, scenarios
from utils.errors import ConfigError, RunFailure, ScheduleError, SimulationError
from utils.logger import get_logger
from utils.marker import MarkerKind
from utils.optics import ALWAYS, NEVER, Geometry
from utils.pilotwave import Trajectory

logger = get_logger("TEST_SCENARIOS")

SMALL = {"integrator": {"chunk_size": 32, "sample_dt": 0.02}, "ensemble": {"mode": "stratified"}}


@pytest.fixture(scope="module")
def open_report():
    return scenarios.run(scenarios.build("wheeler_open", SMALL, n=12))


@pytest.fixture(scope="module")
def closed_report():
    return scenarios.run(scenarios.build("wheeler_closed", SMALL, n=12))


def test_presets_build():
    for name in ("wheeler_open", "wheeler_closed", "essw_spin", "av_pointer"):
        scenario = scenarios.build(name, n=4)
        assert scenario.name == name
        assert scenario.ensemble.n == 4
        assert scenario.t_end == pytest.approx(1.4 + 2 * 6.0 / 50.0, abs=1e-9)
    delayed = scenarios.build("wheeler_delayed", t_c=0.5)
    assert delayed.bs2_schedule.mode == "insert"
    assert delayed.layout.element("BS2").active_interval == (0.5, math.inf)


def test_marker_presets():
    spin = scenarios.build("essw_spin")
    assert spin.marker.kind == MarkerKind.DISCRETE
    assert spin.marker.efficiency_sq == 1.0
    assert spin.marker.interaction_time == pytest.approx(0.8, abs=1e-9)
    partial = scenarios.build("essw_spin", a2=0.25)
    assert partial.marker.a == pytest.approx(0.5)
    pointer = scenarios.build("av_pointer", ejection_speed=100.0)
    assert pointer.marker.has_pointer
    assert pointer.marker.ejection_speed == 100.0


def test_build_rejects_bad_requests():
    with pytest.raises(ConfigError):
        scenarios.build("wheeler_sideways")
    with pytest.raises(ConfigError):
        scenarios.build("wheeler_open", speed=3.0)
    with pytest.raises(ConfigError):
        scenarios.build("wheeler_delayed")
    with pytest.raises(ConfigError):
        scenarios.build("essw_spin", a2=1.5)
    with pytest.raises(ConfigError):
        scenarios.build("wheeler_open", {"optics": {}})


def test_switch_inside_transit_window_is_rejected():
    scenario = scenarios.build("wheeler_open")
    windows = scenarios.i2_transit_windows(scenario.layout)
    logger.info(f"I2 transit windows: {windows}")
    assert set(windows) == {1, 2}
    for start, end in windows.values():
        assert start < 1.0 < end
        assert start > 0.6
    with pytest.raises(ScheduleError):
        scenarios.build("wheeler_delayed", t_c=1.0)
    with pytest.raises(ScheduleError):
        scenarios.build("wheeler_delayed", direction="remove", t_c=1.0)
    assert scenarios.build("wheeler_delayed", direction="remove", t_c=1.3).bs2_schedule.mode == "remove"


def test_schedule_intervals():
    assert scenarios.Bs2Schedule("present").active_interval() == ALWAYS
    assert scenarios.Bs2Schedule("absent").active_interval() == NEVER
    assert scenarios.Bs2Schedule("insert", 0.5).active_interval() == (0.5, math.inf)
    assert scenarios.Bs2Schedule("remove", 0.5).active_interval() == (-math.inf, 0.5)
    with pytest.raises(ConfigError):
        scenarios.Bs2Schedule("remove")


def test_open_interferometer_swaps_without_crossing(open_report):
    aggregates = open_report.aggregates
    logger.info(f"open aggregates: {aggregates}")
    assert aggregates["n"] == 12
    assert aggregates["terminated"] == 12
    assert aggregates["node_flagged"] == 0
    assert aggregates["flagged"] == 0
    assert aggregates["crossings"] == 0
    assert aggregates["straight_fraction"]["channel_1"] == 0.0
    assert aggregates["straight_fraction"]["channel_2"] == 0.0
    assert all(r.swap_class == "swap" for r in open_report.records)
    assert aggregates["P"]["D1"] + aggregates["P"]["D2"] == pytest.approx(1.0)
    assert abs(aggregates["P"]["D1"] - 0.5) <= 0.25


def test_closed_interferometer_fires_only_d1(closed_report):
    aggregates = closed_report.aggregates
    assert aggregates["detector_counts"] == {"D1": 12, "D2": 0}
    assert aggregates["P"]["D1"] == 1.0
    for record in closed_report.records:
        assert record.swap_class == ("straight" if record.channel == 1 else "swap")


def test_report_is_json_serialisable(open_report, tmp_path):
    path = tmp_path / "report.json"
    open_report.save_to_file(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    assert data["scenario"] == "wheeler_open"
    assert data["status"] == "ok"
    assert len(data["records"]) == 12
    assert {"index", "initial", "channel", "detector", "class", "crossed", "flags"} <= set(data["records"][0])
    provenance = data["provenance"]
    assert provenance["seed"] == open_report.provenance["seed"]
    assert len(provenance["config_hash"]) == 64
    assert set(provenance["i2_transit_windows"]) == {"channel_1", "channel_2"}


def test_crossing_and_classification_of_synthetic_paths():
    geometry = Geometry()
    layout = scenarios.build("wheeler_open").layout
    times = np.linspace(0.8, 1.3, 6)
    stays = np.array([[20.0, 10.0], [20.0, 15.0], [21.0, 19.0], [25.0, 20.5], [30.0, 20.5], [35.0, 20.5]])
    passes = np.array([[20.0, 10.0], [20.0, 15.0], [20.0, 20.0], [20.0, 25.0], [20.0, 30.0], [20.0, 35.0]])
    turned = Trajectory(0, times, stays, terminal="D2", channel=1)
    straight = Trajectory(1, times, passes, terminal="D1", channel=1)
    assert not scenarios.crossing(turned, geometry, 8.0)
    assert scenarios.crossing(straight, geometry, 8.0)
    assert scenarios.classify_swap(turned, layout) == "swap"
    assert scenarios.classify_swap(straight, layout) == "straight"
    assert scenarios.classify_swap(Trajectory(2, times, stays), layout) == "unclassified"


def test_delayed_choice_prefix_matches_then_diverges():
    common = {"integrator": {"chunk_size": 8, "sample_dt": 0.05}, "ensemble": {"mode": "stratified"}}
    open_scenario = scenarios.build("wheeler_open", common, n=6, seed=3)
    delayed = scenarios.build("wheeler_delayed", common, n=6, seed=3, t_c=0.4)
    comparison = scenarios.delayed_choice_prefix_check(open_scenario, delayed)
    logger.info(f"prefix comparison: {comparison}")
    assert comparison.prefix_deviation < scenarios.PREFIX_TOLERANCE
    assert comparison.t_prefix == pytest.approx(min(s for s, _ in scenarios.i2_transit_windows(
        open_scenario.layout).values()))
    # channel-1 particles swap to D2 when open and reach D1 when BS2 is in place
    assert comparison.diverged > 0
    assert comparison.late_deviation > 1.0


def test_prefix_comparison_needs_the_same_ensemble():
    with pytest.raises(SimulationError):
        scenarios.delayed_choice_prefix_check(scenarios.build("wheeler_open", n=4, seed=1),
                                              scenarios.build("wheeler_closed", n=4, seed=2))


def test_switch_before_arrival_matches_fixed_schedules(open_report, closed_report):
    inserted = scenarios.run(scenarios.build("wheeler_delayed", SMALL, n=12, t_c=0.5))
    removed = scenarios.run(scenarios.build("wheeler_delayed", SMALL, n=12, t_c=0.5, direction="remove"))
    assert inserted.aggregates["detector_counts"] == closed_report.aggregates["detector_counts"]
    assert removed.aggregates["detector_counts"] == open_report.aggregates["detector_counts"]
    assert [r.detector for r in removed.records] == [r.detector for r in open_report.records]


def test_counts_account_for_every_trajectory(open_report):
    aggregates = open_report.aggregates
    assert aggregates["flagged"] == aggregates["node_flagged"] + aggregates["unterminated"]
    assert sum(aggregates["detector_counts"].values()) + aggregates["flagged"] == aggregates["n"]


def test_unterminated_trajectories_fail_the_run():
    scenario = scenarios.build("wheeler_open", {"integrator": {"t_end": 0.5, "sample_dt": 0.05}}, n=4)
    with pytest.raises(RunFailure) as failure:
        scenarios.run(scenario)
    aggregates = failure.value.report.aggregates
    assert failure.value.report.status == "failed"
    assert aggregates["unterminated"] == 4
    assert aggregates["flagged"] == 4
    assert aggregates["terminated"] == 0
    assert all(r.detector is None for r in failure.value.report.records)
    assert "4 unterminated" in str(failure.value)


def test_open_trajectories_do_not_cross(open_report):
    check = oracle.non_crossing_check(open_report.trajectories)
    logger.info(f"smallest separation {check.min_separation:.3g} at t={check.time}")
    assert check.passed()


def test_field_grid():
    scenario = scenarios.build("wheeler_open", n=4)
    t = scenarios.default_field_time(scenario)
    assert 0.9 < t < 1.1
    grid = scenarios.field_grid(scenario, t, resolution=25)
    assert set(grid) == {"x", "y", "Q", "R2"}
    assert grid["x"].shape == (625,)
    assert np.all(grid["R2"] >= 0)
    assert np.any(np.isfinite(grid["Q"]))


@pytest.mark.slow
def test_which_way_marker_suppresses_swaps():
    report = scenarios.run(scenarios.build("essw_spin", SMALL, n=12))
    aggregates = report.aggregates
    assert aggregates["straight_fraction"]["channel_1"] == 1.0
    assert aggregates["straight_fraction"]["channel_2"] == 1.0
    assert aggregates["locality_violations"] == 0
    joint = aggregates["joint_counts"]
    assert joint["D1"]["down"] == 0
    assert joint["D2"]["up"] == 0


@pytest.mark.slow
def test_pointer_marker_run():
    report = scenarios.run(scenarios.build("av_pointer", SMALL, n=8))
    aggregates = report.aggregates
    assert aggregates["terminated"] == 8
    assert aggregates["locality_violations"] == 0
    for record in report.records:
        assert record.marker == ("fired" if record.channel == 2 else "unfired")
        assert len(record.initial) == 3


@pytest.mark.slow
def test_open_interferometer_born_rule_at_acceptance_size():
    report = scenarios.run(scenarios.build("wheeler_open", {"ensemble": {"mode": "random"}}, n=1000))
    p = report.aggregates["P"]["D1"]
    assert abs(p - 0.5) <= 3 * math.sqrt(0.25 / 1000)
    assert report.aggregates["crossings"] == 0


@pytest.mark.slow
@pytest.mark.parametrize("a2", [0.25, 0.5, 0.75])
def test_partial_efficiency_routes_by_marker(a2):
    report = scenarios.run(scenarios.build("essw_spin", SMALL, n=16, a2=a2))
    assert report.aggregates["locality_violations"] == 0
    channel_2 = [r for r in report.records if r.channel == 2 and r.detector is not None]
    assert channel_2
    for record in channel_2:
        assert record.detector == ("D2" if record.marker == "down" else "D1")
    for record in report.records:
        if record.channel == 1:
            assert record.marker == "up"


@pytest.mark.slow
def test_pointer_outcomes_do_not_depend_on_ejection_speed():
    reports = [scenarios.run(scenarios.build("av_pointer", SMALL, n=8, ejection_speed=speed))
               for speed in (200.0, 2000.0)]
    for report in reports:
        assert report.aggregates["straight_fraction"]["channel_1"] == 1.0
        assert report.aggregates["straight_fraction"]["channel_2"] == 1.0
        for record in report.records:
            assert record.detector == ("D2" if record.channel == 2 else "D1")
    slow, fast = reports
    assert [r.detector for r in slow.records] == [r.detector for r in fast.records]
    assert slow.aggregates["detector_counts"] == fast.aggregates["detector_counts"]
