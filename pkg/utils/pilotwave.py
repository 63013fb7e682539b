"""
Guidance equation, quantum potential and trajectory integration.

The configuration is the particle position (x, y), extended by the pointer
coordinate Y when the marker is a pointer. The conditional wave function is
the branch sum with every marker factor evaluated at the actual marker beable;
the particle is guided by

    dq_j/dt = Im(d_j Psi / Psi) / mass_j

Element actions are instantaneous. Where an element changes |Psi|^2 (packets
overlapping a splitter) the particle is carried across the event by the
monotone rearrangement between the pre- and post-event conditional densities.
"""
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid, solve_ivp, trapezoid
from scipy.optimize import brentq
from scipy.stats import norm
from tqdm import tqdm

from . import marker as markers
from . import wavepacket
from .errors import NodeProximity, SimulationError
from .logger import get_logger
from .marker import MarkerBeable, MarkerKind, MarkerLabel, MarkerModel
from .optics import EVENT_TOLERANCE, Branch, BranchTimeline, Element, ElementKind, Layout
from .performance_monitor import monitor_function
from .wavepacket import GaussianPacket

logger = get_logger("PILOTWAVE")

# |Psi| below this fraction of the largest branch peak counts as a node.
NODE_FLOOR = 1e-12
# Half extent of the transport grid, in packet widths.
TRANSPORT_EXTENT = 8.0
MAX_GRID_POINTS = 8193
# Relative density change below which an element event transports nothing.
DENSITY_CHANGE_FLOOR = 1e-10
# Pointer factors below this fraction of the dominant one are dropped when grouping.
FACTOR_FLOOR = 1e-8

LABEL_CODES = {
    MarkerLabel.NEUTRAL: 0,
    MarkerLabel.UP: 1,
    MarkerLabel.DOWN: 2,
    MarkerLabel.POINTER_UNFIRED: 3,
    MarkerLabel.POINTER_FIRED: 4,
}
UNSET = -1


@dataclass(frozen=True)
class Configuration:
    particle: Tuple[float, float]
    pointer: Optional[float] = None
    t: float = 0.0

    def as_array(self) -> np.ndarray:
        values = list(self.particle)
        if self.pointer is not None:
            values.append(self.pointer)
        return np.asarray(values, dtype=float)


@dataclass
class Trajectory:
    """Sampled configurations of one particle, in increasing time."""
    index: int
    times: np.ndarray
    particle: np.ndarray
    pointer: Optional[np.ndarray] = None
    terminal: Optional[str] = None
    terminal_time: Optional[float] = None
    flags: Tuple[str, ...] = ()
    channel: Optional[int] = None
    beable: MarkerBeable = MarkerBeable()
    marker_outcome: str = "none"
    diagnostics: Dict[str, float] = field(default_factory=dict)

    @property
    def node_degenerate(self) -> bool:
        return "node_degenerate" in self.flags

    @property
    def initial(self) -> Configuration:
        pointer = None if self.pointer is None else float(self.pointer[0])
        return Configuration(tuple(float(v) for v in self.particle[0]), pointer, float(self.times[0]))

    def configurations(self) -> np.ndarray:
        if self.pointer is None:
            return self.particle
        return np.column_stack([self.particle, self.pointer])


@dataclass(frozen=True)
class IntegratorSettings:
    rtol: float = 1e-8
    atol: float = 1e-10
    max_node_retries: int = 10
    sample_dt: float = 0.01
    chunk_size: int = 250
    workers: int = 1
    show_progress: bool = False
    method: str = "DOP853"


def beable_code(beable: MarkerBeable) -> int:
    if beable.discrete_value is None:
        return UNSET
    return LABEL_CODES[beable.discrete_value]


@dataclass(frozen=True)
class GuidanceField:
    """Evaluation context shared by every trajectory of a scenario."""
    layout: Layout
    marker: MarkerModel
    timeline: BranchTimeline
    t_end: float
    channel_time: Optional[float] = None
    _transport_cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def has_pointer(self) -> bool:
        return self.marker.has_pointer

    @property
    def dimension(self) -> int:
        return 3 if self.has_pointer else 2

    @property
    def masses(self) -> np.ndarray:
        m = self.layout.source.mass
        if self.has_pointer:
            return np.array([m, m, self.marker.pointer_mass])
        return np.array([m, m])

    def branches(self, t: float, after_events: bool = True) -> Tuple[Branch, ...]:
        return self.timeline.branches_at(t, after_events)

    def segment_bounds(self, t_start: float, t_end: float) -> List[Tuple[float, float]]:
        """Integration segments between consecutive event times."""
        cuts = sorted(t for t in self.timeline.event_times
                      if t_start + EVENT_TOLERANCE < t < t_end - EVENT_TOLERANCE)
        times = [t_start] + cuts + [t_end]
        return list(zip(times[:-1], times[1:]))

    def density_elements(self, t: float) -> Tuple[Element, ...]:
        """Splitters and mirrors that act (are not transparent) at time t."""
        event = self.timeline.event_at(t)
        if event is None:
            return ()
        elements = [self.layout.element(name) for name in event.acting]
        return tuple(e for e in elements if e.kind != ElementKind.DETECTOR)

    def label_factors(self, label: MarkerLabel, q: np.ndarray, codes: np.ndarray, t: float):
        """Marker factor of ``label`` with its Y derivatives, one value per configuration."""
        n = q.shape[0]
        if label == MarkerLabel.NEUTRAL:
            return np.ones(n), np.zeros(n), np.zeros(n)
        if label in markers.DISCRETE_LABELS:
            f = (codes == LABEL_CODES[label]).astype(float)
            return f, np.zeros(n), np.zeros(n)
        return markers.pointer_jet(self.marker, label, q[:, 2], t)

    def jet(self, q: np.ndarray, codes: np.ndarray, t: float, branches: Optional[Sequence[Branch]] = None):
        """
        Conditional wave function with first and diagonal second derivatives.

        Returns:
            (psi, grad, second, scale); ``scale`` is the largest branch peak
            modulus times its factor, the reference for the node floor.
        """
        if branches is None:
            branches = self.branches(t)
        q = np.atleast_2d(np.asarray(q, dtype=float))
        n, dim = q.shape
        if dim != self.dimension:
            raise SimulationError(f"configuration has {dim} coordinates, the field needs {self.dimension}")
        r = q[:, :2]
        psi = np.zeros(n, dtype=complex)
        grad = np.zeros((n, dim), dtype=complex)
        second = np.zeros((n, dim), dtype=complex)
        scale = np.zeros(n)
        for branch in branches:
            f, fp, fpp = self.label_factors(branch.marker_label, q, codes, t)
            if not (np.any(f) or np.any(fp)):
                continue
            p, g, s = wavepacket.jet(branch.packet, r, t)
            weight = branch.coefficient * f
            psi += weight * p
            grad[:, :2] += weight[:, None] * g
            second[:, :2] += weight[:, None] * s
            if dim == 3:
                grad[:, 2] += branch.coefficient * fp * p
                second[:, 2] += branch.coefficient * fpp * p
            scale = np.maximum(scale, np.abs(weight) * wavepacket.peak_modulus(branch.packet, t))
        return psi, grad, second, scale

    def velocities(self, q: np.ndarray, codes: np.ndarray, t: float,
                   branches: Optional[Sequence[Branch]] = None) -> np.ndarray:
        psi, grad, _, scale = self.jet(q, codes, t, branches)
        bad = (np.abs(psi) < NODE_FLOOR * scale) | (scale == 0.0)
        if np.any(bad):
            raise NodeProximity(np.flatnonzero(bad))
        return np.imag(grad / psi[:, None]) / self.masses

    def quantum_potentials(self, q: np.ndarray, codes: np.ndarray, t: float,
                           branches: Optional[Sequence[Branch]] = None):
        """(Q, |Psi| / scale) per configuration; Q is NaN at nodes."""
        psi, grad, second, scale = self.jet(q, codes, t, branches)
        node = (np.abs(psi) < NODE_FLOOR * scale) | (scale == 0.0)
        safe = np.where(node, 1.0, psi)
        first = grad / safe[:, None]
        curvature = second / safe[:, None]
        Q = -np.sum((curvature.real + first.imag ** 2) / (2.0 * self.masses), axis=1)
        Q = np.where(node, np.nan, Q)
        with np.errstate(invalid="ignore", divide="ignore"):
            relative = np.where(scale > 0, np.abs(psi) / np.where(scale > 0, scale, 1.0), 0.0)
        return Q, relative

    def particle_channels(self, q: np.ndarray, codes: np.ndarray, t: float,
                          branches: Optional[Sequence[Branch]] = None) -> np.ndarray:
        """Dominant channel (1 or 2) of the conditional wave at each configuration, 0 if none."""
        if branches is None:
            branches = self.branches(t)
        weights = np.zeros((q.shape[0], 2))
        for branch in branches:
            channel = branch.channel
            if channel is None:
                continue
            f, _, _ = self.label_factors(branch.marker_label, q, codes, t)
            p = wavepacket.evaluate(branch.packet, q[:, :2], t)
            weights[:, channel - 1] += np.abs(branch.coefficient * f * p) ** 2
        channels = np.argmax(weights, axis=1) + 1
        return np.where(weights.max(axis=1) > 0, channels, 0)


def build_guidance_field(layout: Layout, marker: MarkerModel, t_end: float) -> GuidanceField:
    """Branch timeline of the layout with the marker relabelling scheduled."""
    transforms = []
    if marker.kind != MarkerKind.NONE:
        if marker.interaction_time is None:
            raise SimulationError("marker interaction time must be resolved before building the field")
        transforms.append((marker.interaction_time, marker))
    timeline = BranchTimeline(layout, t_end, transforms)

    channel_time = None
    split_seen = False
    splitter_names = {e.name for e in layout.splitters}
    for event in timeline.events:
        if split_seen:
            channel_time = event.time
            break
        if splitter_names.intersection(event.acting):
            split_seen = True
    logger.debug(f"guidance field: {len(timeline.events)} events up to t={t_end}, channel read at {channel_time}")
    return GuidanceField(layout, marker, timeline, float(t_end), channel_time)


def velocity(field: GuidanceField, q: Configuration, beable: MarkerBeable) -> np.ndarray:
    """Guidance velocity at one configuration."""
    codes = np.array([beable_code(beable)])
    return field.velocities(q.as_array()[None, :], codes, q.t)[0]


def quantum_potential(field: GuidanceField, q: Configuration, beable: MarkerBeable) -> float:
    codes = np.array([beable_code(beable)])
    Q, _ = field.quantum_potentials(q.as_array()[None, :], codes, q.t)
    return float(Q[0])


def sample_ensemble(packet: GaussianPacket, n: int, seed: int, mode: str = "random",
                    pointer_packet: Optional[GaussianPacket] = None) -> List[Configuration]:
    """
    Initial configurations distributed as |psi|^2 at the packet's birth.

    ``random`` draws Gaussian deviates from a seeded generator; ``stratified``
    places particles on the quantiles of the transverse marginal, symmetric
    about the center, with the pointer at its center.
    """
    if n < 1:
        raise SimulationError(f"ensemble size must be at least 1, got {n}")
    t0 = packet.birth_time
    center = packet.center_at(t0)
    spread = packet.width_at(t0) / math.sqrt(2.0)
    if mode == "random":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        particles = rng.normal(center, spread, size=(n, packet.dimension))
        pointers = None
        if pointer_packet is not None:
            p_center = float(pointer_packet.center_at(t0)[0])
            pointers = rng.normal(p_center, pointer_packet.width_at(t0) / math.sqrt(2.0), size=n)
    elif mode == "stratified":
        v = packet.group_velocity
        speed = float(np.linalg.norm(v))
        transverse = np.array([-v[1], v[0]]) / speed if speed > 0 else np.array([1.0, 0.0])
        offsets = spread * norm.ppf((np.arange(n) + 0.5) / n)
        particles = center + offsets[:, None] * transverse
        pointers = None
        if pointer_packet is not None:
            pointers = np.full(n, float(pointer_packet.center_at(t0)[0]))
    else:
        raise SimulationError(f"unknown sampling mode '{mode}'")

    configurations = []
    for i in range(n):
        pointer = None if pointers is None else float(pointers[i])
        configurations.append(Configuration((float(particles[i, 0]), float(particles[i, 1])), pointer, t0))
    return configurations


def sample_grid(t_start: float, t_end: float, dt: float) -> np.ndarray:
    """Common sampling times t_start, t_start + dt, ..., ending exactly at t_end."""
    count = int(math.floor((t_end - t_start) / dt + 1e-9))
    times = t_start + dt * np.arange(count + 1)
    if t_end - times[-1] > 1e-12:
        times = np.append(times, t_end)
    return times


# ---------------------------------------------------------------------------
# Transport across element events

@dataclass
class _ElementTransport:
    """Monotone map between two densities on a grid in an element frame."""
    origin: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    half_width: float
    u_grid: Optional[np.ndarray] = None
    w_grid: Optional[np.ndarray] = None
    marginal_before: Optional[np.ndarray] = None
    marginal_after: Optional[np.ndarray] = None
    rows_before: Optional[np.ndarray] = None
    rows_after: Optional[np.ndarray] = None
    unchanged: bool = False

    def apply(self, points: np.ndarray) -> np.ndarray:
        if self.unchanged or points.shape[0] == 0:
            return points
        rel = points[:, :2] - self.origin
        u0 = rel @ self.normal
        w0 = rel @ self.tangent
        inside = (np.abs(u0) <= self.half_width) & (np.abs(w0) <= self.half_width)
        if not np.any(inside):
            return points
        u0, w0 = u0[inside], w0[inside]

        if self.marginal_before is None:
            w1 = w0
        else:
            level = np.interp(w0, self.w_grid, self.marginal_before)
            w1 = np.interp(level, self.marginal_after, self.w_grid)

        before = _blend_rows(self.w_grid, self.rows_before, w0)
        after = _blend_rows(self.w_grid, self.rows_after, w1)
        u1 = np.empty_like(u0)
        for i in range(u0.size):
            level = np.interp(u0[i], self.u_grid, before[i])
            u1[i] = np.interp(level, after[i], self.u_grid)

        moved = points.copy()
        moved[inside, :2] = self.origin + u1[:, None] * self.normal + w1[:, None] * self.tangent
        return moved


def _blend_rows(grid: np.ndarray, rows: np.ndarray, coord: np.ndarray) -> np.ndarray:
    """Row CDFs linearly interpolated at fractional row positions."""
    position = np.interp(coord, grid, np.arange(grid.size, dtype=float))
    j = np.clip(np.floor(position).astype(int), 0, grid.size - 2)
    lam = (position - j)[:, None]
    return (1.0 - lam) * rows[j] + lam * rows[j + 1]


def _monotone_cdf(density: np.ndarray, grid: np.ndarray, axis: int = -1) -> np.ndarray:
    """Normalised, strictly increasing cumulative integral; empty rows become a ramp."""
    cdf = cumulative_trapezoid(density, grid, axis=axis, initial=0.0)
    cdf = np.maximum.accumulate(np.moveaxis(cdf, axis, -1), axis=-1)
    total = cdf[..., -1:]
    ramp = np.linspace(0.0, 1.0, grid.size)
    cdf = np.where(total > 0, cdf / np.where(total > 0, total, 1.0), ramp)
    return (1.0 - 1e-12) * cdf + 1e-12 * ramp


def _branch_sum(branches: Sequence[Branch], factors: Dict[MarkerLabel, complex],
                points: np.ndarray, t: float) -> np.ndarray:
    total = np.zeros(points.shape[:-1], dtype=complex)
    for branch in branches:
        factor = factors.get(branch.marker_label, 0.0)
        if factor == 0:
            continue
        total += branch.coefficient * factor * wavepacket.evaluate(branch.packet, points, t)
    return total


def _largest_wavevector_gap(branches: Sequence[Branch], direction: np.ndarray) -> float:
    projections = [float(np.asarray(b.packet.wavevector) @ direction) for b in branches]
    if len(projections) < 2:
        return 0.0
    return max(projections) - min(projections)


def _build_transport(element: Element, t: float, before: Sequence[Branch], after: Sequence[Branch],
                     factors: Dict[MarkerLabel, complex]) -> Optional[_ElementTransport]:
    crossing = [b for b in after
                if any(e.element == element.name and abs(e.time - t) <= EVENT_TOLERANCE for e in b.history)]
    if not crossing:
        return None
    origin = np.mean([b.packet.center_at(t) for b in crossing], axis=0)
    width = max(b.packet.width_at(t) for b in crossing)
    half = TRANSPORT_EXTENT * width
    normal = np.asarray(element.normal)
    tangent = element.tangent

    live_before = [b for b in before if factors.get(b.marker_label, 0.0) != 0]
    live_after = [b for b in after if factors.get(b.marker_label, 0.0) != 0]

    def spacing(direction):
        gap = max(_largest_wavevector_gap(live_before, direction), _largest_wavevector_gap(live_after, direction))
        step = width / 16.0
        if gap > 0:
            step = min(step, 2.0 * np.pi / gap / 24.0)
        return step

    nu = min(MAX_GRID_POINTS, int(math.ceil(2.0 * half / spacing(normal))) + 1)
    nw = min(MAX_GRID_POINTS, int(math.ceil(2.0 * half / spacing(tangent))) + 1)
    u_grid = np.linspace(-half, half, nu)
    w_grid = np.linspace(-half, half, nw)
    points = origin + u_grid[None, :, None] * normal + w_grid[:, None, None] * tangent

    p = np.abs(_branch_sum(live_before, factors, points, t)) ** 2
    q = np.abs(_branch_sum(live_after, factors, points, t)) ** 2
    transport = _ElementTransport(origin, normal, tangent, half)
    p_total = trapezoid(trapezoid(p, u_grid, axis=1), w_grid)
    q_total = trapezoid(trapezoid(q, u_grid, axis=1), w_grid)
    if p_total <= 0 or q_total <= 0:
        transport.unchanged = True
        return transport
    p, q = p / p_total, q / q_total
    if np.max(np.abs(p - q)) <= DENSITY_CHANGE_FLOOR * max(p.max(), q.max()):
        transport.unchanged = True
        return transport

    marginal_before = _monotone_cdf(trapezoid(p, u_grid, axis=1), w_grid)
    marginal_after = _monotone_cdf(trapezoid(q, u_grid, axis=1), w_grid)
    if np.max(np.abs(marginal_before - marginal_after)) > 1e-12:
        transport.marginal_before = marginal_before
        transport.marginal_after = marginal_after
    transport.u_grid = u_grid
    transport.w_grid = w_grid
    transport.rows_before = _monotone_cdf(p, u_grid, axis=1)
    transport.rows_after = _monotone_cdf(q, u_grid, axis=1)
    logger.debug(f"transport grid at {element.name} t={t:.6f}: {nw} x {nu}")
    return transport


def _factor_groups(field: GuidanceField, labels: Sequence[MarkerLabel], q: np.ndarray,
                   codes: np.ndarray, t: float) -> Dict[tuple, np.ndarray]:
    """Configurations whose conditional waves agree up to a constant, grouped."""
    values = np.column_stack([field.label_factors(label, q, codes, t)[0] for label in labels]).astype(complex)
    dominant = values[np.arange(q.shape[0]), np.argmax(np.abs(values), axis=1)]
    safe = np.where(dominant == 0, 1.0, dominant)
    relative = values / safe[:, None]
    relative[np.abs(relative) < FACTOR_FLOOR] = 0.0
    groups: Dict[tuple, List[int]] = {}
    for i in range(q.shape[0]):
        key = tuple(np.round(relative[i].real, 12)) + tuple(np.round(relative[i].imag, 12))
        groups.setdefault(key, []).append(i)
    return {key: np.asarray(members) for key, members in groups.items()}


def transport_across_event(field: GuidanceField, q: np.ndarray, codes: np.ndarray, t: float) -> np.ndarray:
    """Carry configurations across the element events at time t."""
    elements = field.density_elements(t)
    if not elements or q.shape[0] == 0:
        return q
    before = field.branches(t, after_events=False)
    after = field.branches(t, after_events=True)
    labels = sorted({b.marker_label for b in before + after}, key=lambda label: LABEL_CODES[label])
    moved = q.copy()
    for key, members in _factor_groups(field, labels, q, codes, t).items():
        n_labels = len(labels)
        factors = {label: complex(key[i], key[n_labels + i]) for i, label in enumerate(labels)}
        for element in elements:
            cache_key = (round(t, 12), element.name, key)
            if cache_key not in field._transport_cache:
                field._transport_cache[cache_key] = _build_transport(element, t, before, after, factors)
            transport = field._transport_cache[cache_key]
            if transport is not None:
                moved[members] = transport.apply(moved[members])
    return moved


# ---------------------------------------------------------------------------
# Integration

class _SegmentRHS:
    def __init__(self, field: GuidanceField, branches: Sequence[Branch], codes: np.ndarray):
        self.field = field
        self.branches = branches
        self.codes = codes
        self.dim = field.dimension

    def __call__(self, t, y):
        q = y.reshape(-1, self.dim)
        return self.field.velocities(q, self.codes, t, self.branches).ravel()


class _ChunkIntegrator:
    """Integrates one chunk of configurations as a single ODE system."""

    def __init__(self, field: GuidanceField, q0: np.ndarray, indices: np.ndarray, seed: int,
                 settings: IntegratorSettings, t_start: float, t_end: float):
        self.field = field
        self.settings = settings
        self.seed = seed
        self.indices = np.asarray(indices)
        self.t_start = t_start
        self.t_end = t_end
        self.dim = field.dimension
        n = q0.shape[0]
        self.q = q0.astype(float).copy()
        self.active = np.arange(n)
        self.codes = np.full(n, UNSET, dtype=int)
        self.beables = [markers.initial_beable(field.marker, q0[i, 2] if field.has_pointer else None)
                        for i in range(n)]
        self.channels: List[Optional[int]] = [None] * n
        self.flags: List[List[str]] = [[] for _ in range(n)]
        self.terminal: List[Optional[str]] = [None] * n
        self.terminal_time: List[Optional[float]] = [None] * n
        self.sample_times: List[List[np.ndarray]] = [[np.array([t_start])] for _ in range(n)]
        self.sample_q: List[List[np.ndarray]] = [[self.q[i][None, :]] for i in range(n)]
        self.max_q = np.full(n, -np.inf)
        self.min_modulus = np.full(n, np.inf)
        self.grid = sample_grid(t_start, t_end, settings.sample_dt)
        source_speed = field.layout.source.speed
        radius = min((d.aperture for d in field.layout.detectors), default=1.0)
        self.detect_dt = radius / (8.0 * source_speed) if source_speed > 0 else settings.sample_dt

    def run(self) -> List[Trajectory]:
        field = self.field
        self._record_diagnostics(self.t_start, self.q[self.active][None], self.active,
                                 field.branches(self.t_start))
        for ta, tb in field.segment_bounds(self.t_start, self.t_end):
            if self.active.size == 0:
                break
            branches = field.branches(ta, after_events=True)
            solution = self._solve(ta, tb, branches)
            if solution is None:
                break
            self._collect(ta, tb, solution, branches)
            if tb < self.t_end - EVENT_TOLERANCE:
                self._apply_events(tb)
        return self._trajectories()

    def _solve(self, ta: float, tb: float, branches):
        settings = self.settings
        max_step = np.inf
        retries = 0
        while self.active.size:
            active = self.active
            y0 = self.q[active].ravel()
            shrink = math.sqrt(y0.size)
            rhs = _SegmentRHS(self.field, branches, self.codes[active])
            try:
                solution = solve_ivp(rhs, (ta, tb), y0, method=settings.method,
                                     rtol=settings.rtol / shrink, atol=settings.atol / shrink,
                                     dense_output=True, max_step=max_step)
            except NodeProximity as exc:
                retries += 1
                if retries > settings.max_node_retries:
                    bad = active[list(exc.indices)]
                    for i in bad:
                        self.flags[i].append("node_degenerate")
                    self.active = np.setdiff1d(active, bad)
                    logger.warning(f"trajectories {self.indices[bad].tolist()} flagged node_degenerate "
                                   f"in segment [{ta:.6f}, {tb:.6f}]")
                    retries = 0
                    max_step = np.inf
                else:
                    max_step = (tb - ta) / 2 ** retries
                    logger.debug(f"node proximity in [{ta:.6f}, {tb:.6f}], retry {retries} with max_step {max_step:.3g}")
                continue
            if not solution.success:
                raise SimulationError(f"integration failed on [{ta}, {tb}]: {solution.message}")
            return solution
        return None

    def _detect(self, ta: float, tb: float, solution) -> Dict[int, Tuple[float, str]]:
        """First detector-disk entry per active configuration within the segment."""
        dim = self.dim
        n_fine = max(2, int(math.ceil((tb - ta) / self.detect_dt)) + 1)
        times = np.linspace(ta, tb, n_fine)
        path = solution.sol(times).reshape(self.active.size, dim, n_fine)
        hits: Dict[int, Tuple[float, str]] = {}
        for detector in self.field.layout.detectors:
            cx, cy = detector.position
            radius = detector.aperture
            inside = np.hypot(path[:, 0, :] - cx, path[:, 1, :] - cy) <= radius
            for j in np.flatnonzero(inside.any(axis=1)):
                k = int(np.argmax(inside[j]))
                if k == 0:
                    t_hit = ta
                else:
                    def distance(t, j=j):
                        point = solution.sol(t)[j * dim:j * dim + 2]
                        return math.hypot(point[0] - cx, point[1] - cy) - radius
                    t_hit = brentq(distance, times[k - 1], times[k], xtol=1e-13)
                if j not in hits or t_hit < hits[j][0]:
                    hits[int(j)] = (float(t_hit), detector.label)
        return hits

    def _collect(self, ta: float, tb: float, solution, branches):
        dim = self.dim
        active = self.active
        mask = (self.grid > ta + 1e-12) & (self.grid <= tb + 1e-12)
        seg_times = np.minimum(self.grid[mask], tb)
        hits = self._detect(ta, tb, solution)
        if seg_times.size:
            path = solution.sol(seg_times).reshape(active.size, dim, seg_times.size)
            self._record_diagnostics_path(seg_times, path, hits, branches)
        for j, i in enumerate(active):
            times = seg_times
            values = path[j].T if seg_times.size else np.empty((0, dim))
            if j in hits:
                t_hit, label = hits[j]
                keep = times < t_hit - 1e-12
                end_point = solution.sol(t_hit)[j * dim:(j + 1) * dim]
                times = np.append(times[keep], t_hit)
                values = np.vstack([values[keep], end_point[None, :]])
                self.terminal[i] = label
                self.terminal_time[i] = t_hit
            self.sample_times[i].append(times)
            self.sample_q[i].append(values)
        self.q[active] = solution.y[:, -1].reshape(active.size, dim)
        if hits:
            self.active = np.array([i for j, i in enumerate(active) if j not in hits], dtype=int)

    def _record_diagnostics_path(self, times, path, hits, branches):
        active = self.active
        for k, t in enumerate(times):
            alive = np.array([j not in hits or t <= hits[j][0] for j in range(active.size)])
            if not np.any(alive):
                continue
            self._record_diagnostics(t, path[alive, :, k][None], active[alive], branches)

    def _record_diagnostics(self, t, q_stack, members, branches):
        if members.size == 0:
            return
        Q, relative = self.field.quantum_potentials(q_stack[0], self.codes[members], t, branches)
        self.max_q[members] = np.fmax(self.max_q[members], Q)
        self.min_modulus[members] = np.fmin(self.min_modulus[members], relative)

    def _apply_events(self, t: float):
        field = self.field
        active = self.active
        if active.size == 0:
            return
        before = field.branches(t, after_events=False)
        if field.channel_time is not None and abs(t - field.channel_time) <= EVENT_TOLERANCE:
            channels = field.particle_channels(self.q[active], self.codes[active], t, before)
            for j, i in enumerate(active):
                self.channels[i] = int(channels[j]) or None

        self.q[active] = transport_across_event(field, self.q[active], self.codes[active], t)

        event = field.timeline.event_at(t)
        if event is not None and event.relabel:
            model = field.marker
            channels = field.particle_channels(self.q[active], self.codes[active], t, before)
            for j, i in enumerate(active):
                beable = self.beables[i]
                if field.has_pointer:
                    beable = replace(beable, pointer_position=float(self.q[i, 2]))
                rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(int(self.indices[i]),)))
                _, beable = markers.interact(model, before, beable, int(channels[j]) or None, rng)
                self.beables[i] = beable
                self.codes[i] = beable_code(beable)

    def _trajectories(self) -> List[Trajectory]:
        trajectories = []
        model = self.field.marker
        for i, index in enumerate(self.indices):
            times = np.concatenate(self.sample_times[i])
            values = np.vstack(self.sample_q[i])
            flags = list(self.flags[i])
            if self.terminal[i] is None and not flags:
                flags.append("unterminated")
            beable = self.beables[i]
            pointer = None
            if self.field.has_pointer:
                pointer = values[:, 2].copy()
                beable = replace(beable, pointer_position=float(pointer[-1]))
            outcome = "none"
            if model.kind != MarkerKind.NONE and beable.interacted:
                outcome = markers.marker_outcome(model, beable, float(times[-1]))
            elif model.kind != MarkerKind.NONE:
                outcome = "unset"
            trajectories.append(Trajectory(
                index=int(index),
                times=times,
                particle=values[:, :2].copy(),
                pointer=pointer,
                terminal=self.terminal[i],
                terminal_time=self.terminal_time[i],
                flags=tuple(flags),
                channel=self.channels[i],
                beable=beable,
                marker_outcome=outcome,
                diagnostics={
                    "max_quantum_potential": float(self.max_q[i]),
                    "min_relative_modulus": float(self.min_modulus[i]),
                },
            ))
        return trajectories


def _integrate_chunk(task) -> List[Trajectory]:
    field, q0, indices, seed, settings, t_start, t_end = task
    return _ChunkIntegrator(field, q0, indices, seed, settings, t_start, t_end).run()


def _tasks(field: GuidanceField, initial: Sequence[Configuration], seed: int,
           settings: IntegratorSettings, t_end: float, indices: Optional[Sequence[int]]):
    if not initial:
        raise SimulationError("no initial configurations")
    t_start = initial[0].t
    if any(abs(c.t - t_start) > 1e-12 for c in initial):
        raise SimulationError("initial configurations must share one time")
    if not t_start < t_end <= field.t_end + EVENT_TOLERANCE:
        raise SimulationError(f"t_end={t_end} must lie in ({t_start}, {field.t_end}]")
    q0 = np.array([c.as_array() for c in initial])
    if q0.shape[1] != field.dimension:
        raise SimulationError(f"configurations have {q0.shape[1]} coordinates, the field needs {field.dimension}")
    indices = np.arange(len(initial)) if indices is None else np.asarray(indices, dtype=int)
    size = settings.chunk_size
    return [(field, q0[s:s + size], indices[s:s + size], seed, settings, t_start, t_end)
            for s in range(0, len(initial), size)]


def integrate(field: GuidanceField, q0: Configuration, t_end: Optional[float] = None, seed: int = 0,
              index: int = 0, settings: Optional[IntegratorSettings] = None) -> Trajectory:
    """Integrate a single configuration."""
    settings = settings or IntegratorSettings()
    t_end = field.t_end if t_end is None else t_end
    task = _tasks(field, [q0], seed, replace(settings, chunk_size=1), t_end, [index])[0]
    return _integrate_chunk(task)[0]


@monitor_function("pilotwave.integrate_ensemble",
                  context=lambda field, initial, *args, **kwargs: {"n": len(initial)})
def integrate_ensemble(field: GuidanceField, initial: Sequence[Configuration], seed: int,
                       settings: Optional[IntegratorSettings] = None, t_end: Optional[float] = None,
                       indices: Optional[Sequence[int]] = None) -> List[Trajectory]:
    """
    Integrate an ensemble in chunks, in a process pool when workers > 1.

    Results are ordered by trajectory index and do not depend on the number
    of workers.
    """
    settings = settings or IntegratorSettings()
    t_end = field.t_end if t_end is None else t_end
    tasks = _tasks(field, initial, seed, settings, t_end, indices)
    progress = dict(total=len(tasks), desc="chunks", file=sys.stderr, disable=not settings.show_progress)
    if settings.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=settings.workers) as pool:
            results = list(tqdm(pool.map(_integrate_chunk, tasks), **progress))
    else:
        results = [_integrate_chunk(task) for task in tqdm(tasks, **progress)]
    trajectories = sorted((t for chunk in results for t in chunk), key=lambda t: t.index)
    flagged = sum(t.node_degenerate for t in trajectories)
    logger.info(f"integrated {len(trajectories)} trajectories to t={t_end:.4f} ({flagged} node-flagged)")
    return trajectories
