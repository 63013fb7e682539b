"""
Independent checks of the simulator against analytic and numerical references.

Born probabilities are computed twice, from the branch algebra with exact
Gaussian and marker inner products and by grid quadrature of the
marker-marginal density. Field derivatives are checked against Richardson
extrapolated central differences, the ensemble against the |Psi|^2 marginal
with a chi-square test, and the trajectories for non-crossing.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.spatial.distance import pdist
from scipy.stats import chisquare

from . import marker as markers
from . import wavepacket
from .config_manager import RunConfig
from .errors import OracleFailure, SimulationError
from .logger import get_logger
from .marker import MarkerBeable, MarkerModel
from .optics import ALWAYS, NEVER, Branch, Layout, detector_amplitudes
from .performance_monitor import monitor_function
from .pilotwave import GuidanceField, Trajectory, beable_code, integrate_ensemble, sample_ensemble
from .scenarios import (PREFIX_TOLERANCE, Scenario, build, default_field_time, delayed_choice_prefix_check,
                        i2_transit_windows, reference_beable)

logger = get_logger("ORACLE")

BORN_TOLERANCE = 1e-4
CONVERGENCE_TOLERANCE = 1e-5
FD_TOLERANCES = {"gradient": 1e-6, "laplacian": 1e-5, "velocity": 1e-5, "quantum_potential": 1e-5}
FD_STEPS = {"gradient": 1e-4, "velocity": 1e-4, "laplacian": 1e-3, "quantum_potential": 1e-3}
EQUIVARIANCE_LEVEL = 0.01

NON_CROSSING_TOLERANCE = 1e-6
# |Psi| floor for derivative checks, relative to the largest branch peak.
FD_NODE_FLOOR = 1e-8
# Sample points stay this many difference steps away from the nearest zero of Psi.
NODE_CLEARANCE_STEPS = 20


@dataclass(frozen=True)
class QuadratureGrid:
    """Rectangular grid in a rotated frame: origin + a * axes[0] + b * axes[1]."""
    origin: Tuple[float, float]
    axes: Tuple[Tuple[float, float], Tuple[float, float]]
    half_widths: Tuple[float, float]
    shape: Tuple[int, int]
    t: float

    @classmethod
    def covering(cls, branches: Sequence[Branch], t: float,
                 axes: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
                 pad: float = 8.0, points_per_sigma: int = 16, refine: int = 1) -> 'QuadratureGrid':
        """
        Grid covering every packet center by ``pad`` widths, with at least
        ``points_per_sigma`` points per width and 24 points per fringe.
        """
        if not branches:
            raise SimulationError("quadrature grid over no branches")
        if pad < 8.0 or points_per_sigma < 16:
            raise SimulationError("quadrature grids need at least 8 widths of padding and 16 points per width")
        if axes is None:
            axes = ((1.0, 0.0), (0.0, 1.0))
        frame = np.array(axes, dtype=float)
        frame /= np.linalg.norm(frame, axis=1, keepdims=True)
        centers = np.array([b.packet.center_at(t) for b in branches])
        widths = np.array([b.packet.width_at(t) for b in branches])
        reach = pad * widths.max()
        projected = centers @ frame.T
        low = projected.min(axis=0) - reach
        high = projected.max(axis=0) + reach
        middle = 0.5 * (low + high)
        half = 0.5 * (high - low)

        shape = []
        for axis in frame:
            k = [float(np.asarray(b.packet.wavevector) @ axis) for b in branches]
            step = widths.min() / points_per_sigma
            gap = max(k) - min(k)
            if gap > 0:
                step = min(step, 2.0 * np.pi / gap / 24.0)
            step /= refine
            shape.append(int(math.ceil(2.0 * half[len(shape)] / step)) + 1)
        origin = middle @ frame
        return cls(tuple(origin), (tuple(frame[0]), tuple(frame[1])), tuple(half), tuple(shape), float(t))

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        a = np.linspace(-self.half_widths[0], self.half_widths[0], self.shape[0])
        b = np.linspace(-self.half_widths[1], self.half_widths[1], self.shape[1])
        return a, b

    def points(self) -> np.ndarray:
        """Grid points, shape (n_b, n_a, 2)."""
        a, b = self.coordinates()
        e1, e2 = np.asarray(self.axes[0]), np.asarray(self.axes[1])
        return np.asarray(self.origin) + a[None, :, None] * e1 + b[:, None, None] * e2

    def marginal(self, values: np.ndarray) -> np.ndarray:
        """Integral over the second axis; a function of the first."""
        _, b = self.coordinates()
        return trapezoid(values, b, axis=0)

    def integrate(self, values: np.ndarray) -> float:
        a, _ = self.coordinates()
        return float(trapezoid(self.marginal(values), a))


def marginal_density(branches: Sequence[Branch], model: MarkerModel, points: np.ndarray, t: float) -> np.ndarray:
    """Particle density with the marker traced out."""
    values = [branch.coefficient * wavepacket.evaluate(branch.packet, points, t) for branch in branches]
    density = np.zeros(points.shape[:-1])
    for i, first in enumerate(branches):
        for j, second in enumerate(branches):
            overlap = markers.label_inner_product(model, first.marker_label, second.marker_label)
            if overlap == 0:
                continue
            density += (np.conj(values[i]) * values[j] * overlap).real
    return density


def born_estimates(scenario: Scenario, detector: str, refine: int = 1) -> Tuple[float, float]:
    """(branch algebra, grid quadrature) estimates of P(detector)."""
    guidance = scenario.guidance_field()
    model = scenario.marker
    final = guidance.timeline.final_branches()
    absorbed = [b for b in final if b.detector == detector]
    if not absorbed:
        return 0.0, 0.0

    algebraic = 0.0 + 0.0j
    for first in absorbed:
        for second in absorbed:
            algebraic += (np.conj(first.coefficient) * second.coefficient
                          * wavepacket.inner_product(first.packet, second.packet)
                          * markers.label_inner_product(model, first.marker_label, second.marker_label))

    t_arrival = max(e.time for b in absorbed for e in b.history if e.outcome == "absorbed")
    live = guidance.branches(t_arrival, after_events=True)
    grid = QuadratureGrid.covering(absorbed, t_arrival, refine=refine)
    quadrature = grid.integrate(marginal_density(live, model, grid.points(), t_arrival))
    return float(algebraic.real), float(quadrature)


@monitor_function("oracle.born_probability",
                  context=lambda scenario, detector, *args, **kwargs: {"scenario": scenario.name, "detector": detector})
def born_probability(scenario: Scenario, detector: str, tolerance: float = BORN_TOLERANCE) -> float:
    """
    Born probability of a detector.

    Raises:
        OracleFailure: The algebraic and quadrature estimates differ by more than ``tolerance``
    """
    algebraic, quadrature = born_estimates(scenario, detector)
    if abs(algebraic - quadrature) > tolerance:
        raise OracleFailure(f"P({detector}) for {scenario.name}: algebra {algebraic:.8f} "
                            f"vs quadrature {quadrature:.8f}")
    return algebraic


def quadrature_convergence(scenario: Scenario, detector: str) -> float:
    """Change of the quadrature estimate when the grid spacing is halved."""
    _, coarse = born_estimates(scenario, detector, refine=1)
    _, fine = born_estimates(scenario, detector, refine=2)
    return abs(coarse - fine)


# ---------------------------------------------------------------------------
# Finite differences

def _richardson(estimate, h: float):
    return (4.0 * estimate(h / 2.0) - estimate(h)) / 3.0


@dataclass
class FdErrors:
    """Worst pointwise relative error, and the error normalised by the largest analytic magnitude."""
    pointwise: float
    normalised: float


def fd_errors(field_name: str, guidance: GuidanceField, points: np.ndarray, t: float,
              codes: Optional[np.ndarray] = None) -> FdErrors:
    """
    Compare an analytic field with Richardson-extrapolated central differences.

    The pointwise error of a configuration is |numeric - analytic| / |analytic|
    (vector norms for gradient and velocity). The quantum potential changes
    sign, so its denominator is at least the curvature scale 1/(m sigma(t)^2)
    of the narrowest live packet.

    Raises:
        SimulationError: Unknown field, or a point below the node floor
    """
    if field_name not in FD_STEPS:
        raise SimulationError(f"unknown field '{field_name}'")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n, dim = points.shape
    if codes is None:
        codes = np.full(n, -1)
    branches = guidance.branches(t)
    h = FD_STEPS[field_name]

    def psi_at(q):
        return guidance.jet(q, codes, t, branches)[0]

    psi, grad, second, scale = guidance.jet(points, codes, t, branches)
    if np.any(np.abs(psi) <= FD_NODE_FLOOR * scale):
        raise SimulationError(f"fd_check points must satisfy |Psi| > {FD_NODE_FLOOR:g} of the peak")
    unit = np.eye(dim)

    if field_name == "gradient":
        analytic = grad
        numeric = np.column_stack([
            _richardson(lambda s, j=j: (psi_at(points + s * unit[j]) - psi_at(points - s * unit[j])) / (2 * s), h)
            for j in range(dim)])
    elif field_name == "laplacian":
        analytic = np.sum(second, axis=1)
        numeric = sum(
            _richardson(lambda s, j=j: (psi_at(points + s * unit[j]) - 2 * psi + psi_at(points - s * unit[j])) / s ** 2, h)
            for j in range(dim))
    elif field_name == "velocity":
        analytic = guidance.velocities(points, codes, t, branches)
        numeric = np.column_stack([
            _richardson(lambda s, j=j: np.angle(psi_at(points + s * unit[j]) * np.conj(psi_at(points - s * unit[j])))
                        / (2 * s), h) / guidance.masses[j]
            for j in range(dim)])
    else:
        analytic, _ = guidance.quantum_potentials(points, codes, t, branches)
        modulus = np.abs(psi)
        numeric = -sum(
            _richardson(lambda s, j=j: (np.abs(psi_at(points + s * unit[j])) - 2 * modulus
                                        + np.abs(psi_at(points - s * unit[j]))) / s ** 2, h)
            / (2.0 * guidance.masses[j])
            for j in range(dim)) / modulus

    analytic = np.asarray(analytic)
    deviation = np.abs(np.asarray(numeric) - analytic)
    magnitude = np.abs(analytic)
    if deviation.ndim == 2:
        deviation = np.linalg.norm(deviation, axis=1)
        magnitude = np.linalg.norm(analytic, axis=1)
    if field_name == "quantum_potential":
        width = min(b.packet.width_at(t) for b in branches)
        magnitude = np.maximum(magnitude, 1.0 / (guidance.layout.source.mass * width ** 2))
    errors = FdErrors(pointwise=float(np.max(deviation / magnitude)),
                      normalised=float(np.max(deviation) / np.max(magnitude)))
    logger.debug(f"fd_check {field_name} at t={t}: pointwise {errors.pointwise:.3g}, "
                 f"normalised {errors.normalised:.3g} over {n} points")
    return errors


def fd_check(field_name: str, guidance: GuidanceField, points: np.ndarray, t: float,
             codes: Optional[np.ndarray] = None) -> float:
    """
    Largest pointwise relative deviation between an analytic field and its finite-difference estimate.

    Args:
        field_name: gradient, laplacian, velocity or quantum_potential
        guidance: Field to check
        points: Configurations, shape (n, dimension), away from nodes
        t: Time
        codes: Discrete beable codes per configuration
    """
    return fd_errors(field_name, guidance, points, t, codes).pointwise


def sample_points(guidance: GuidanceField, t: float, n: int, rng: np.random.Generator,
                  beable: Optional[MarkerBeable] = None, spread: float = 1.5,
                  max_attempts: int = 100) -> np.ndarray:
    """
    Random configurations around the live packets, ``spread`` widths wide so
    the low-amplitude tails are included.

    A candidate is kept when |Psi| exceeds the node floor and the nearest
    zero of Psi, estimated as |Psi| / |grad |Psi||, is at least
    NODE_CLEARANCE_STEPS of the largest difference step away, so no
    difference stencil reaches a node.
    """
    beable = beable or MarkerBeable()
    branches = [b for b in guidance.branches(t) if b.detector is None] or list(guidance.branches(t))
    clearance = NODE_CLEARANCE_STEPS * max(FD_STEPS.values())
    accepted: List[np.ndarray] = []
    code = beable_code(beable)
    for _ in range(max_attempts):
        chosen = rng.integers(len(branches), size=4 * n)
        candidates = np.empty((4 * n, guidance.dimension))
        for i, k in enumerate(chosen):
            packet = branches[k].packet
            candidates[i, :2] = rng.normal(packet.center_at(t), spread * packet.width_at(t))
        if guidance.has_pointer:
            candidates[:, 2] = beable.pointer_position
        codes = np.full(candidates.shape[0], code)
        psi, grad, _, scale = guidance.jet(candidates, codes, t, branches)
        live = (scale > 0) & (np.abs(psi) > FD_NODE_FLOOR * scale)
        safe = np.where(live, psi, 1.0)
        modulus_slope = np.linalg.norm(np.real(grad / safe[:, None]), axis=1)
        keep = live & (modulus_slope * clearance <= 1.0)
        accepted.extend(candidates[keep])
        if len(accepted) >= n:
            return np.array(accepted[:n])
    raise SimulationError(f"found only {len(accepted)} of {n} sample points away from nodes")


# ---------------------------------------------------------------------------
# Ensemble checks

@dataclass
class EquivarianceResult:
    t: float
    statistic: float
    p_value: float
    counts: np.ndarray
    expected: np.ndarray
    trajectories: List[Trajectory] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.p_value > EQUIVARIANCE_LEVEL


@monitor_function("oracle.equivariance_test",
                  context=lambda scenario, t_check, *args, **kwargs: {"scenario": scenario.name, "t": t_check})
def equivariance_test(scenario: Scenario, t_check: float, n: Optional[int] = None, bins: int = 20,
                      axis: Optional[Sequence[float]] = None, seed: Optional[int] = None) -> EquivarianceResult:
    """
    Chi-square comparison of the ensemble's projected positions at t_check
    with the |Psi(t_check)|^2 marginal on equal-probability bins.
    """
    n = n or scenario.ensemble.n
    seed = scenario.ensemble.seed if seed is None else seed
    if n < 20 * bins:
        raise SimulationError(f"equivariance test needs at least {20 * bins} particles for {bins} bins")
    layout = scenario.layout
    axis = np.asarray(layout.geometry.symmetry_normal if axis is None else axis, dtype=float)
    axis /= np.linalg.norm(axis)
    perpendicular = np.array([-axis[1], axis[0]])

    guidance = scenario.guidance_field(t_end=min(scenario.t_end, max(t_check, layout.source.birth_time)))
    pointer_packet = markers.unfired_packet(scenario.marker) if scenario.marker.has_pointer else None
    initial = sample_ensemble(layout.source, n, seed, scenario.ensemble.mode, pointer_packet)
    trajectories = integrate_ensemble(guidance, initial, seed, scenario.integrator, t_end=t_check)
    finals = np.array([tr.particle[-1] for tr in trajectories
                       if not tr.node_degenerate and abs(tr.times[-1] - t_check) <= 1e-12])
    projected = finals @ axis

    branches = guidance.branches(t_check, after_events=False)
    grid = QuadratureGrid.covering(branches, t_check, axes=(axis, perpendicular))
    density = marginal_density(branches, scenario.marker, grid.points(), t_check)
    a, _ = grid.coordinates()
    along = grid.marginal(density)
    cdf = cumulative_trapezoid(along, a, initial=0.0)
    cdf /= cdf[-1]
    cdf = np.maximum.accumulate(cdf)
    levels = np.arange(1, bins) / bins
    edges = np.interp(levels, cdf + 1e-15 * np.arange(cdf.size), a)
    offset = float(np.asarray(grid.origin) @ axis)
    edges = np.concatenate([[-np.inf], edges + offset, [np.inf]])
    counts, _ = np.histogram(projected, bins=edges)
    expected = np.full(bins, projected.size / bins)
    statistic, p_value = chisquare(counts, expected)
    logger.info(f"equivariance {scenario.name} t={t_check}: chi2={statistic:.2f} p={p_value:.3f}")
    return EquivarianceResult(float(t_check), float(statistic), float(p_value), counts, expected, trajectories)


@dataclass
class NonCrossingResult:
    min_separation: float
    time: Optional[float]

    def passed(self, tolerance: float = NON_CROSSING_TOLERANCE) -> bool:
        return self.min_separation > tolerance


def non_crossing_check(trajectories: Sequence[Trajectory]) -> NonCrossingResult:
    """Smallest configuration-space distance between any two trajectories at a common sample time."""
    by_time: Dict[float, List[np.ndarray]] = {}
    for trajectory in trajectories:
        configurations = trajectory.configurations()
        for k, t in enumerate(trajectory.times):
            by_time.setdefault(float(t), []).append(configurations[k])
    best = (math.inf, None)
    for t, rows in by_time.items():
        if len(rows) < 2:
            continue
        separation = float(pdist(np.array(rows)).min())
        if separation < best[0]:
            best = (separation, t)
    return NonCrossingResult(*best)


# ---------------------------------------------------------------------------
# Amplitude conventions

# Detector amplitudes per channel under the quarter-wave reflection convention.
EXPECTED_AMPLITUDES = {
    "open": {"D1": {1: -1 / math.sqrt(2)}, "D2": {2: 1j / math.sqrt(2)}},
    "closed": {"D1": {1: -0.5, 2: -0.5}, "D2": {1: -0.5j, 2: 0.5j}},
}


@dataclass
class AmplitudeCheck:
    passed: bool
    mismatches: List[str]
    amplitudes: Dict[str, Dict[str, Dict[int, complex]]]


def amplitude_convention_check(layout: Layout, tolerance: float = 1e-12) -> AmplitudeCheck:
    """Per-channel detector amplitudes of the open and closed interferometer against the reference table."""
    second = layout.splitters[1].name
    mismatches: List[str] = []
    found: Dict[str, Dict[str, Dict[int, complex]]] = {}
    for setting, interval in (("open", NEVER), ("closed", ALWAYS)):
        variant = layout.with_element(second, active_interval=interval)
        amplitudes = detector_amplitudes(variant)
        found[setting] = {}
        for detector, expected in EXPECTED_AMPLITUDES[setting].items():
            per_channel: Dict[int, complex] = {}
            for channel, coefficient in amplitudes.get(detector, []):
                per_channel[channel] = per_channel.get(channel, 0) + coefficient
            found[setting][detector] = per_channel
            for channel in sorted(set(expected) | set(per_channel)):
                want = expected.get(channel, 0.0)
                got = per_channel.get(channel, 0.0)
                if abs(want - got) > tolerance:
                    mismatches.append(f"{setting} {detector} channel {channel}: expected {want}, got {got}")
    return AmplitudeCheck(not mismatches, mismatches, found)


# ---------------------------------------------------------------------------
# Suite

@dataclass
class CheckResult:
    name: str
    value: Optional[float]
    threshold: str
    passed: bool
    detail: str = ""


def _validation_scenario(config: RunConfig, name: str, n: Optional[int] = None, **params) -> Scenario:
    overrides = config.scenario_overrides()
    for section in ("marker", "schedule"):
        overrides.pop(section, None)
    overrides["ensemble"] = {"n": n or config.validate["n"], "seed": config.validate["seed"],
                             "mode": "random"}
    overrides["integrator"] = {k: v for k, v in overrides["integrator"].items() if k != "t_end"}
    return build(name, overrides, **params)


def _guarded(name: str, threshold: str, check) -> CheckResult:
    try:
        value, passed, detail = check()
    except (OracleFailure, SimulationError) as e:
        logger.error(f"{name} failed: {e}")
        return CheckResult(name, None, threshold, False, str(e))
    return CheckResult(name, value, threshold, passed, detail)


@monitor_function("oracle.run_suite")
def run_suite(config: RunConfig) -> List[CheckResult]:
    """Every oracle check on the scenarios of ``config``'s geometry and packet."""
    results: List[CheckResult] = []
    open_scenario = _validation_scenario(config, "wheeler_open")
    closed_scenario = _validation_scenario(config, "wheeler_closed")
    spin_scenario = _validation_scenario(config, "essw_spin")
    pointer_scenario = _validation_scenario(config, "av_pointer")

    def amplitude():
        check = amplitude_convention_check(open_scenario.layout)
        return None, check.passed, "; ".join(check.mismatches)
    results.append(_guarded("amplitude_convention", "1e-12", amplitude))

    for scenario, detector in ((open_scenario, "D1"), (closed_scenario, "D1"),
                               (closed_scenario, "D2"), (spin_scenario, "D2")):
        def born(scenario=scenario, detector=detector):
            algebraic, quadrature = born_estimates(scenario, detector)
            gap = abs(algebraic - quadrature)
            return gap, gap <= BORN_TOLERANCE, f"P={algebraic:.6f}"
        results.append(_guarded(f"born_{scenario.name}_{detector}", f"{BORN_TOLERANCE:g}", born))

    def convergence():
        value = quadrature_convergence(closed_scenario, "D1")
        return value, value < CONVERGENCE_TOLERANCE, ""
    results.append(_guarded("quadrature_convergence", f"{CONVERGENCE_TOLERANCE:g}", convergence))

    rng = np.random.default_rng(np.random.SeedSequence(config.validate["seed"]))
    fd_points = config.validate["fd_points"]
    for scenario in (open_scenario, spin_scenario, pointer_scenario):
        t_overlap = default_field_time(scenario)
        guidance = scenario.guidance_field()
        beable = reference_beable(scenario, t_overlap)
        points = sample_points(guidance, t_overlap, fd_points, rng, beable)
        codes = np.full(points.shape[0], beable_code(beable))
        for name, tolerance in FD_TOLERANCES.items():
            def fd(name=name, tolerance=tolerance, guidance=guidance, points=points, codes=codes, t=t_overlap):
                errors = fd_errors(name, guidance, points, t, codes)
                return errors.pointwise, errors.pointwise <= tolerance, \
                    f"t={t:.4f} normalised={errors.normalised:.2e}"
            results.append(_guarded(f"fd_{name}_{scenario.name}", f"{tolerance:g}", fd))

    equivariance_runs = []
    for t_check in _checkpoints(open_scenario):
        def equivariance(t_check=t_check):
            result = equivariance_test(open_scenario, t_check)
            equivariance_runs.append(result)
            return result.p_value, result.passed, f"chi2={result.statistic:.2f}"
        results.append(_guarded(f"equivariance_t{t_check:.2f}", f"p>{EQUIVARIANCE_LEVEL:g}", equivariance))

    if equivariance_runs:
        def crossing():
            check = non_crossing_check(equivariance_runs[-1].trajectories)
            return check.min_separation, check.passed(), f"at t={check.time}"
        results.append(_guarded("non_crossing", f">{NON_CROSSING_TOLERANCE:g}", crossing))

    def prefix():
        windows_start = min(s for s, _ in i2_transit_windows(open_scenario.layout).values())
        delayed = _validation_scenario(config, "wheeler_delayed", direction="insert",
                                       t_c=0.5 * (open_scenario.layout.source.birth_time + windows_start))
        comparison = delayed_choice_prefix_check(open_scenario, delayed, n=min(200, config.validate["n"]))
        return (comparison.prefix_deviation, comparison.prefix_deviation < PREFIX_TOLERANCE,
                f"late={comparison.late_deviation:.2e} diverged={comparison.diverged}")
    results.append(_guarded("delayed_choice_prefix", f"{PREFIX_TOLERANCE:g}", prefix))
    return results


def _checkpoints(scenario: Scenario) -> Tuple[float, ...]:
    """Before the first splitter, in the arms and in the I2 overlap."""
    timeline = scenario.guidance_field().timeline
    first_split = timeline.events[0].time
    birth = scenario.layout.source.birth_time
    arms = [e.time for e in timeline.events if e.time > first_split]
    mid_arm = 0.5 * (first_split + arms[0]) if arms else first_split
    return (birth + 0.5 * (first_split - birth), mid_arm, default_field_time(scenario))
