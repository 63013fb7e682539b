import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from utils import scenarios
from utils.errors import NodeProximity, SimulationError
from utils.logger import get_logger
from utils.marker import MarkerBeable
from utils.pilotwave import (Configuration, IntegratorSettings, integrate, integrate_ensemble, quantum_potential,
                             sample_ensemble, sample_grid, velocity)

logger = get_logger("TEST_PILOTWAVE")

SMALL = {"integrator": {"chunk_size": 16, "sample_dt": 0.02}}


@pytest.fixture(scope="module")
def open_scenario():
    return scenarios.build("wheeler_open", SMALL, n=8, seed=5)


@pytest.fixture(scope="module")
def closed_scenario():
    return scenarios.build("wheeler_closed", SMALL, n=8, seed=5)


def test_velocity_of_free_packet_is_group_velocity(open_scenario):
    field = open_scenario.guidance_field()
    for x in (0.0, 0.7, -1.2):
        v = velocity(field, Configuration((x, -10.0), None, 0.0), MarkerBeable())
        np.testing.assert_allclose(v, [0.0, 50.0], atol=1e-10)


def test_quantum_potential_at_packet_center(open_scenario):
    field = open_scenario.guidance_field()
    Q = quantum_potential(field, Configuration((0.0, -10.0), None, 0.0), MarkerBeable())
    assert Q == pytest.approx(1.0)


def test_spreading_adds_radial_velocity(open_scenario):
    field = open_scenario.guidance_field()
    t = 0.15
    center = open_scenario.layout.source.center_at(t)
    v = velocity(field, Configuration((center[0] + 1.0, center[1]), None, t), MarkerBeable())
    assert v[0] > 0
    assert v[1] == pytest.approx(50.0)


def test_dark_output_is_a_node(closed_scenario):
    field = closed_scenario.guidance_field()
    with pytest.raises(NodeProximity):
        field.velocities(np.array([[30.0, 20.0]]), np.array([-1]), 1.2)
    Q, relative = field.quantum_potentials(np.array([[30.0, 20.0]]), np.array([-1]), 1.2)
    assert np.isnan(Q[0])
    assert relative[0] < 1e-12


def test_segments_break_at_events(open_scenario):
    field = open_scenario.guidance_field()
    bounds = field.segment_bounds(0.0, field.t_end)
    starts = [a for a, _ in bounds]
    assert starts[0] == 0.0
    assert bounds[-1][1] == field.t_end
    for t_event in (0.2, 0.6, 1.0):
        assert min(abs(s - t_event) for s in starts) < 1e-9
    assert field.channel_time == pytest.approx(0.6, abs=1e-9)


def test_sample_ensemble_is_reproducible(open_scenario):
    source = open_scenario.layout.source
    first = sample_ensemble(source, 200, 42)
    second = sample_ensemble(source, 200, 42)
    other = sample_ensemble(source, 200, 43)
    assert first == second
    assert first != other
    points = np.array([c.particle for c in first])
    assert np.abs(points.mean(axis=0) - [0.0, -10.0]).max() < 0.25
    assert all(c.t == 0.0 for c in first)


def test_stratified_ensemble_is_symmetric(open_scenario):
    source = open_scenario.layout.source
    configurations = sample_ensemble(source, 10, 0, mode="stratified")
    xs = np.array([c.particle[0] for c in configurations])
    ys = np.array([c.particle[1] for c in configurations])
    np.testing.assert_allclose(np.sort(xs), -np.sort(xs)[::-1], atol=1e-12)
    np.testing.assert_allclose(ys, -10.0)
    with pytest.raises(SimulationError):
        sample_ensemble(source, 10, 0, mode="lattice")


def test_sample_grid_ends_exactly():
    np.testing.assert_allclose(sample_grid(0.0, 1.0, 0.3), [0.0, 0.3, 0.6, 0.9, 1.0])
    np.testing.assert_allclose(sample_grid(0.0, 1.0, 0.25), [0.0, 0.25, 0.5, 0.75, 1.0])


def test_single_trajectory_reaches_a_detector(open_scenario):
    field = open_scenario.guidance_field()
    trajectory = integrate(field, Configuration((0.4, -10.0), None, 0.0), seed=1)
    logger.info(f"terminal {trajectory.terminal} at t={trajectory.terminal_time}")
    assert trajectory.terminal in ("D1", "D2")
    assert trajectory.terminal_time < field.t_end
    assert trajectory.channel in (1, 2)
    assert np.all(np.diff(trajectory.times) > 0)
    assert trajectory.times[-1] == pytest.approx(trajectory.terminal_time)
    detector = open_scenario.layout.element(trajectory.terminal)
    end = trajectory.particle[-1]
    assert np.hypot(*(end - np.asarray(detector.position))) == pytest.approx(detector.aperture, abs=1e-6)
    assert trajectory.diagnostics["max_quantum_potential"] > 0
    assert not trajectory.node_degenerate


def test_ensemble_order_and_worker_independence(open_scenario):
    field = open_scenario.guidance_field(t_end=0.5)
    initial = sample_ensemble(open_scenario.layout.source, 6, 9)
    settings = IntegratorSettings(chunk_size=4, sample_dt=0.05)
    serial = integrate_ensemble(field, initial, 9, settings, t_end=0.5)
    pooled = integrate_ensemble(field, initial, 9, IntegratorSettings(chunk_size=4, sample_dt=0.05, workers=2),
                                t_end=0.5)
    assert [t.index for t in serial] == list(range(6))
    for a, b in zip(serial, pooled):
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.particle, b.particle)
        assert "unterminated" in a.flags


def test_integration_rejects_bad_inputs(open_scenario):
    field = open_scenario.guidance_field()
    with pytest.raises(SimulationError):
        integrate_ensemble(field, [], 0)
    with pytest.raises(SimulationError):
        integrate(field, Configuration((0.0, -10.0), 0.5, 0.0))
    with pytest.raises(SimulationError):
        integrate(field, Configuration((0.0, -10.0), None, 0.0), t_end=field.t_end + 1.0)
