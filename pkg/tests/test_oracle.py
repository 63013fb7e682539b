import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from utils import oracle, scenarios
from utils.config_manager import RunConfig
from utils.errors import SimulationError
from utils.logger import get_logger
from utils.marker import MarkerBeable
from utils.pilotwave import Trajectory

logger = get_logger("TEST_ORACLE")


@pytest.fixture(scope="module")
def open_scenario():
    return scenarios.build("wheeler_open", n=400, seed=7)


@pytest.fixture(scope="module")
def closed_scenario():
    return scenarios.build("wheeler_closed", n=400, seed=7)


def test_amplitude_convention_accepts_quarter_wave_reflection(open_scenario):
    check = oracle.amplitude_convention_check(open_scenario.layout)
    assert check.passed, check.mismatches


def test_amplitude_convention_flags_flipped_phase():
    flipped = scenarios.build("wheeler_open", {"geometry": {"reflection_phase": "-i"}})
    check = oracle.amplitude_convention_check(flipped.layout)
    logger.info(f"mismatches under -i: {check.mismatches}")
    assert not check.passed
    assert any("D2" in m for m in check.mismatches)


def test_born_probabilities(open_scenario, closed_scenario):
    assert oracle.born_probability(open_scenario, "D1") == pytest.approx(0.5, abs=1e-10)
    assert oracle.born_probability(open_scenario, "D2") == pytest.approx(0.5, abs=1e-10)
    assert oracle.born_probability(closed_scenario, "D1") == pytest.approx(1.0, abs=1e-10)
    assert oracle.born_probability(closed_scenario, "D2") == pytest.approx(0.0, abs=1e-10)
    spin = scenarios.build("essw_spin")
    assert oracle.born_probability(spin, "D2") == pytest.approx(0.5, abs=1e-10)


def test_partial_marker_probabilities():
    closed_partial = scenarios.build("essw_spin", {"schedule": {"bs2": "present"}}, a2=0.5)
    algebraic, quadrature = oracle.born_estimates(closed_partial, "D2")
    logger.info(f"P(D2) with a^2 = 0.5 and BS2 present: {algebraic:.6f} / {quadrature:.6f}")
    assert algebraic == pytest.approx(0.25 * (1 - np.sqrt(0.5)) ** 2 + 0.25 * 0.5, abs=1e-10)
    assert abs(algebraic - quadrature) <= oracle.BORN_TOLERANCE


def test_quadrature_converges(closed_scenario):
    assert oracle.quadrature_convergence(closed_scenario, "D1") < oracle.CONVERGENCE_TOLERANCE


def test_field_derivatives_match_finite_differences(open_scenario):
    t = scenarios.default_field_time(open_scenario)
    guidance = open_scenario.guidance_field()
    rng = np.random.default_rng(1)
    points = oracle.sample_points(guidance, t, 40, rng)
    for name, tolerance in oracle.FD_TOLERANCES.items():
        error = oracle.fd_check(name, guidance, points, t)
        logger.info(f"{name}: {error:.3g}")
        assert error <= tolerance
    with pytest.raises(SimulationError):
        oracle.fd_check("curl", guidance, points, t)


def test_sample_points_reach_the_tails_but_not_the_nodes(open_scenario):
    t = scenarios.default_field_time(open_scenario)
    guidance = open_scenario.guidance_field()
    branches = guidance.branches(t)
    points = oracle.sample_points(guidance, t, 200, np.random.default_rng(5))
    codes = np.full(len(points), -1)
    psi, grad, _, scale = guidance.jet(points, codes, t, branches)
    relative = np.abs(psi) / scale
    logger.info(f"sampled |Psi| from {relative.min():.2e} to {relative.max():.2e} of the peak")
    assert np.all(relative > oracle.FD_NODE_FLOOR)
    assert relative.min() < 0.05
    distance_to_node = 1.0 / np.linalg.norm(np.real(grad / psi[:, None]), axis=1)
    assert np.all(distance_to_node >= oracle.NODE_CLEARANCE_STEPS * max(oracle.FD_STEPS.values()) * (1 - 1e-9))


def test_fd_check_rejects_points_below_the_node_floor(open_scenario):
    guidance = open_scenario.guidance_field()
    packet = guidance.branches(0.1)[0].packet
    far = np.asarray(packet.center_at(0.1)) + 10.0 * packet.width_at(0.1)
    with pytest.raises(SimulationError):
        oracle.fd_check("velocity", guidance, far[None, :], 0.1)
    errors = oracle.fd_errors("gradient", guidance, np.asarray(packet.center_at(0.1))[None, :] + 0.5, 0.1)
    assert errors.pointwise <= oracle.FD_TOLERANCES["gradient"]
    assert errors.normalised <= errors.pointwise * (1 + 1e-12)


def test_pointer_field_derivatives():
    scenario = scenarios.build("av_pointer", ejection_speed=20.0)
    t = scenarios.default_field_time(scenario)
    guidance = scenario.guidance_field()
    beable = scenarios.reference_beable(scenario, t)
    points = oracle.sample_points(guidance, t, 8, np.random.default_rng(2), beable)
    assert points.shape == (8, 3)
    for name in ("gradient", "velocity"):
        assert oracle.fd_check(name, guidance, points, t) <= oracle.FD_TOLERANCES[name]


def test_single_packet_marginal_density(open_scenario):
    guidance = open_scenario.guidance_field()
    branches = guidance.branches(0.1)
    grid = oracle.QuadratureGrid.covering(branches, 0.1)
    density = oracle.marginal_density(branches, open_scenario.marker, grid.points(), 0.1)
    assert grid.integrate(density) == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(SimulationError):
        oracle.QuadratureGrid.covering(branches, 0.1, pad=4.0)
    with pytest.raises(SimulationError):
        oracle.QuadratureGrid.covering([], 0.1)


def test_non_crossing_on_synthetic_trajectories():
    times = np.array([0.0, 0.1, 0.2])
    first = Trajectory(0, times, np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0]]))
    second = Trajectory(1, times, np.array([[1.0, 0.0], [0.5, 1.0], [0.25, 2.0]]))
    result = oracle.non_crossing_check([first, second])
    assert result.min_separation == pytest.approx(0.25)
    assert result.time == pytest.approx(0.2)
    assert result.passed()
    touching = Trajectory(2, times, np.array([[2.0, 0.0], [0.0, 1.0], [3.0, 2.0]]))
    assert not oracle.non_crossing_check([first, touching]).passed()


def test_equivariance_needs_enough_particles(open_scenario):
    with pytest.raises(SimulationError):
        oracle.equivariance_test(open_scenario, 0.1, n=100, bins=20)


@pytest.mark.slow
def test_equivariance_before_and_after_the_splitter(open_scenario):
    for t_check in (0.1, 0.4):
        result = oracle.equivariance_test(open_scenario, t_check)
        logger.info(f"t={t_check}: chi2={result.statistic:.2f} p={result.p_value:.3f}")
        assert result.counts.sum() == 400
        assert result.passed
    assert oracle.non_crossing_check(result.trajectories).passed()


@pytest.mark.slow
def test_full_suite_passes():
    config = RunConfig.from_dict({"validate": {"n": 400, "seed": 7, "fd_points": 20}})
    results = oracle.run_suite(config)
    failed = [(r.name, r.detail) for r in results if not r.passed]
    assert not failed
    assert any(r.name == "amplitude_convention" for r in results)


@pytest.mark.slow
def test_full_suite_flags_flipped_reflection_phase():
    config = RunConfig.from_dict({"geometry": {"reflection_phase": "-i"},
                                  "validate": {"n": 400, "seed": 7, "fd_points": 20}})
    results = {r.name: r for r in oracle.run_suite(config)}
    assert not results["amplitude_convention"].passed
