"""
The interferometer as a set of planar optical elements acting on branches.

Each branch is one term of the total superposition: a packet in unfolded form
(a free packet whose mirror images are taken at every reflection), a complex
coefficient, a marker label and the history of element events that produced
the coefficient. Elements act instantaneously when a packet center crosses
their plane inside the aperture.
"""
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import wavepacket
from .errors import OpticsError
from .logger import get_logger
from .marker import MarkerLabel, MarkerModel, relabel_branches
from .wavepacket import GaussianPacket

logger = get_logger("OPTICS")

# Arrival within this distance of an activity endpoint is ambiguous.
SCHEDULE_TOLERANCE = 1e-12
# Crossings closer than this in time are one event.
EVENT_TOLERANCE = 1e-9

ALWAYS = (-math.inf, math.inf)
NEVER = (math.inf, math.inf)

INV_SQRT2 = 1.0 / math.sqrt(2.0)


class ElementKind(str, Enum):
    BEAM_SPLITTER = "beam_splitter"
    MIRROR = "mirror"
    DETECTOR = "detector"


@dataclass(frozen=True)
class Element:
    """A planar element: splitter, mirror or absorbing detector."""
    name: str
    kind: ElementKind
    position: Tuple[float, float]
    normal: Tuple[float, float]
    aperture: float
    rho: float = 0.0
    tau: float = 0.0
    active_interval: Tuple[float, float] = ALWAYS
    label: Optional[str] = None

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = float(np.linalg.norm(n))
        if norm == 0.0:
            raise OpticsError(f"element {self.name} has a zero normal")
        object.__setattr__(self, "normal", tuple(n / norm))
        object.__setattr__(self, "position", tuple(float(p) for p in self.position))
        if self.kind == ElementKind.BEAM_SPLITTER:
            if self.rho < 0 or self.tau < 0 or abs(self.rho ** 2 + self.tau ** 2 - 1.0) > 1e-12:
                raise OpticsError(f"splitter {self.name} needs real rho, tau >= 0 with rho^2 + tau^2 = 1")
        if self.kind == ElementKind.DETECTOR and not self.label:
            raise OpticsError(f"detector {self.name} needs a label")
        start, end = self.active_interval
        if start > end:
            raise OpticsError(f"element {self.name} has an inverted activity interval")

    @property
    def tangent(self) -> np.ndarray:
        nx, ny = self.normal
        return np.array([-ny, nx])

    def is_active(self, t: float) -> bool:
        """Activity at arrival time t; arrivals at an interval endpoint are rejected."""
        start, end = self.active_interval
        for endpoint in (start, end):
            if math.isfinite(endpoint) and abs(t - endpoint) <= SCHEDULE_TOLERANCE:
                raise OpticsError(
                    f"packet reaches {self.name} at t={t!r}, within {SCHEDULE_TOLERANCE} of "
                    f"the activity endpoint {endpoint!r}"
                )
        return start <= t < end


@dataclass(frozen=True)
class BranchEvent:
    """One factor of a branch coefficient."""
    element: str
    outcome: str
    time: float
    factor: complex


@dataclass(frozen=True)
class Branch:
    packet: GaussianPacket
    coefficient: complex
    marker_label: MarkerLabel = MarkerLabel.NEUTRAL
    history: Tuple[BranchEvent, ...] = ()
    clock: float = 0.0
    detector: Optional[str] = None

    @property
    def channel(self) -> Optional[int]:
        """1 if the first splitter reflected this branch, 2 if it transmitted it."""
        for event in self.history:
            if event.outcome == "reflected":
                return 1
            if event.outcome == "transmitted":
                return 2
        return None

    def audit_coefficient(self) -> complex:
        """Product of the per-event factors in the history."""
        value = 1.0 + 0.0j
        for event in self.history:
            value *= event.factor
        return value


@dataclass(frozen=True)
class Geometry:
    """
    Square interferometer dimensions (lengths in units of sigma0).

    Packets reach the detectors about 1.7 sigma0 wide, so detector disks of
    radius 2 sigma0 would miss about a tenth of the trajectories, far above
    the flagged-trajectory budget. The default radius of 6 sigma0 covers 3.5
    arrival widths.
    """
    arm_length: float = 20.0
    source_distance: float = 10.0
    detector_distance: float = 20.0
    aperture: float = 5.0
    i2_radius: float = 3.0
    detector_radius: float = 6.0

    @property
    def i2_center(self) -> np.ndarray:
        return np.array([self.arm_length, self.arm_length])

    @property
    def symmetry_normal(self) -> np.ndarray:
        """Unit normal of the symmetry axis through I2 (the axis runs along (1, 1))."""
        return np.array([INV_SQRT2, -INV_SQRT2])

    def axis_side(self, r) -> np.ndarray:
        """Signed distance from the symmetry axis; channel 1 approaches I2 on the positive side."""
        return (np.asarray(r, dtype=float) - self.i2_center) @ self.symmetry_normal

    def total_path(self) -> float:
        return self.source_distance + 2.0 * self.arm_length + self.detector_distance + self.detector_radius


@dataclass(frozen=True)
class Layout:
    elements: Tuple[Element, ...]
    source: GaussianPacket
    geometry: Geometry
    reflection_factor: complex = 1j
    initial_label: MarkerLabel = MarkerLabel.NEUTRAL

    def element(self, name: str) -> Element:
        for element in self.elements:
            if element.name == name:
                return element
        raise OpticsError(f"layout has no element named {name}")

    def with_element(self, name: str, **changes) -> 'Layout':
        """Copy of the layout with one element's fields replaced."""
        self.element(name)
        elements = tuple(replace(e, **changes) if e.name == name else e for e in self.elements)
        return replace(self, elements=elements)

    @property
    def detectors(self) -> Tuple[Element, ...]:
        return tuple(e for e in self.elements if e.kind == ElementKind.DETECTOR)

    @property
    def splitters(self) -> Tuple[Element, ...]:
        return tuple(e for e in self.elements if e.kind == ElementKind.BEAM_SPLITTER)

    def horizon(self) -> float:
        """A time by which every branch has reached a detector."""
        return self.source.birth_time + 2.0 * self.geometry.total_path() / self.source.speed


def source_packet(geometry: Geometry, sigma0: float = 1.0, mass: float = 1.0,
                  speed: float = 50.0, birth_time: float = 0.0) -> GaussianPacket:
    """Source packet below BS1 moving in +y."""
    return GaussianPacket(center=(0.0, -geometry.source_distance), wavevector=(0.0, mass * speed),
                          sigma0=sigma0, mass=mass, birth_time=birth_time)


def build_mach_zehnder(geometry: Geometry, source: GaussianPacket,
                       bs2_interval: Tuple[float, float] = ALWAYS,
                       reflection_factor: complex = 1j,
                       bs1_reflectance: float = 0.5,
                       bs2_reflectance: float = 0.5,
                       initial_label: MarkerLabel = MarkerLabel.NEUTRAL) -> Layout:
    """
    Square Mach-Zehnder layout.

    BS1 sits at the origin. Channel 1 (reflected at BS1) runs +x to M1, then
    +y through BS2 to D1. Channel 2 (transmitted) runs +y to M2, then +x
    through BS2 to D2. Splitters and mirrors lie along (1, 1).
    """
    L = geometry.arm_length
    d = geometry.detector_distance
    diagonal = (INV_SQRT2, -INV_SQRT2)
    elements = (
        Element("BS1", ElementKind.BEAM_SPLITTER, (0.0, 0.0), diagonal, geometry.aperture,
                rho=math.sqrt(bs1_reflectance), tau=math.sqrt(1.0 - bs1_reflectance)),
        Element("M1", ElementKind.MIRROR, (L, 0.0), diagonal, geometry.aperture),
        Element("M2", ElementKind.MIRROR, (0.0, L), diagonal, geometry.aperture),
        Element("BS2", ElementKind.BEAM_SPLITTER, (L, L), diagonal, geometry.aperture,
                rho=math.sqrt(bs2_reflectance), tau=math.sqrt(1.0 - bs2_reflectance),
                active_interval=bs2_interval),
        Element("D1", ElementKind.DETECTOR, (L, L + d), (0.0, 1.0), geometry.detector_radius, label="D1"),
        Element("D2", ElementKind.DETECTOR, (L + d, L), (1.0, 0.0), geometry.detector_radius, label="D2"),
    )
    return Layout(elements=elements, source=source, geometry=geometry,
                  reflection_factor=complex(reflection_factor), initial_label=initial_label)


def _next_crossing(branch: Branch, elements: Sequence[Element]) -> Optional[Tuple[float, Element]]:
    """Earliest element plane crossed by the branch center after its clock."""
    packet = branch.packet
    c = packet.center_at(branch.clock)
    v = packet.group_velocity
    best = None
    for element in elements:
        n = np.asarray(element.normal)
        p = np.asarray(element.position)
        vn = float(v @ n)
        if abs(vn) < 1e-12:
            continue
        dt = float((p - c) @ n) / vn
        if dt <= EVENT_TOLERANCE:
            continue
        hit = c + v * dt
        if abs(float((hit - p) @ element.tangent)) > element.aperture:
            continue
        if best is None or dt < best[0]:
            best = (dt, element)
    if best is None:
        return None
    return branch.clock + best[0], best[1]


def _act(branch: Branch, element: Element, t: float, layout: Layout) -> List[Branch]:
    """Apply one element to one branch at crossing time t."""
    if element.kind == ElementKind.DETECTOR:
        event = BranchEvent(element.name, "absorbed", t, 1.0 + 0.0j)
        return [replace(branch, history=branch.history + (event,), clock=t, detector=element.label)]

    if not element.is_active(t):
        return [replace(branch, clock=t)]

    reflected_packet = wavepacket.mirrored(branch.packet, element.position, element.normal)
    if element.kind == ElementKind.MIRROR:
        factor = layout.reflection_factor
        event = BranchEvent(element.name, "reflected", t, factor)
        return [replace(branch, packet=reflected_packet, coefficient=branch.coefficient * factor,
                        history=branch.history + (event,), clock=t)]

    results = []
    if element.tau > 0.0:
        event = BranchEvent(element.name, "transmitted", t, complex(element.tau))
        results.append(replace(branch, coefficient=branch.coefficient * element.tau,
                               history=branch.history + (event,), clock=t))
    if element.rho > 0.0:
        factor = element.rho * layout.reflection_factor
        event = BranchEvent(element.name, "reflected", t, factor)
        results.append(replace(branch, packet=reflected_packet, coefficient=branch.coefficient * factor,
                               history=branch.history + (event,), clock=t))
    return results


@dataclass(frozen=True)
class TimelineEvent:
    """Everything that happens at one instant."""
    time: float
    acting: Tuple[str, ...]
    transparent: Tuple[str, ...]
    relabel: bool = False


class BranchTimeline:
    """
    Branch sets of a layout between successive events, computed once.

    ``label_transforms`` are (time, marker model) pairs; at each such time the
    marker relabels every live branch.
    """

    def __init__(self, layout: Layout, horizon: float,
                 label_transforms: Sequence[Tuple[float, MarkerModel]] = ()):
        if horizon < layout.source.birth_time:
            raise OpticsError(f"horizon {horizon} precedes the source birth {layout.source.birth_time}")
        self.layout = layout
        self.horizon = float(horizon)
        self.label_transforms = tuple(sorted(label_transforms, key=lambda item: item[0]))
        self.events: List[TimelineEvent] = []
        self._snapshots: List[Tuple[float, Tuple[Branch, ...]]] = []
        self._evolve()

    def _evolve(self):
        layout = self.layout
        birth = layout.source.birth_time
        branches = [Branch(layout.source, 1.0 + 0.0j, layout.initial_label, (), clock=birth)]
        self._snapshots.append((birth, tuple(branches)))
        pending = list(self.label_transforms)

        while True:
            crossings = []
            for index, branch in enumerate(branches):
                if branch.detector is not None:
                    continue
                hit = _next_crossing(branch, layout.elements)
                if hit is not None:
                    crossings.append((hit[0], index, hit[1]))
            t_cross = min((c[0] for c in crossings), default=math.inf)
            t_relabel = pending[0][0] if pending else math.inf
            t_next = min(t_cross, t_relabel)
            if t_next > self.horizon:
                break

            acting, transparent = [], []
            simultaneous = {index: (t, element) for t, index, element in crossings
                            if t - t_next <= EVENT_TOLERANCE}
            updated = []
            for index, branch in enumerate(branches):
                if index not in simultaneous:
                    updated.append(branch)
                    continue
                t_hit, element = simultaneous[index]
                produced = _act(branch, element, t_hit, layout)
                if len(produced) == 1 and produced[0].packet is branch.packet and not produced[0].history[len(branch.history):]:
                    transparent.append(element.name)
                else:
                    acting.append(element.name)
                updated.extend(produced)
            branches = updated

            relabel = False
            while pending and pending[0][0] - t_next <= EVENT_TOLERANCE:
                _, model = pending.pop(0)
                branches = list(relabel_branches(model, branches, t_next))
                relabel = True

            self.events.append(TimelineEvent(t_next, tuple(sorted(set(acting))),
                                             tuple(sorted(set(transparent))), relabel))
            self._snapshots.append((t_next, tuple(branches)))
            logger.debug(f"t={t_next:.6f}: acting={sorted(set(acting))} transparent={sorted(set(transparent))} "
                         f"relabel={relabel} branches={len(branches)}")

    def branches_at(self, t: float, after_events: bool = True) -> Tuple[Branch, ...]:
        """
        Branches live at time t.

        Args:
            t: Time, not earlier than the source birth and not beyond the horizon
            after_events: Whether events scheduled exactly at t have happened
        """
        if t < self.layout.source.birth_time:
            raise OpticsError(f"t={t} precedes the source birth")
        if t > self.horizon + EVENT_TOLERANCE:
            raise OpticsError(f"t={t} is beyond the timeline horizon {self.horizon}")
        chosen = self._snapshots[0][1]
        for time, branches in self._snapshots[1:]:
            if time < t - EVENT_TOLERANCE or (after_events and time <= t + EVENT_TOLERANCE):
                chosen = branches
            else:
                break
        return chosen

    def branch_segments(self) -> List[Tuple[Branch, float, float]]:
        """(branch, start, end) for every branch over every inter-event interval."""
        segments = []
        for i, (time, branches) in enumerate(self._snapshots):
            end = self._snapshots[i + 1][0] if i + 1 < len(self._snapshots) else self.horizon
            segments.extend((branch, time, end) for branch in branches)
        return segments

    def event_at(self, t: float) -> Optional[TimelineEvent]:
        for event in self.events:
            if abs(event.time - t) <= EVENT_TOLERANCE:
                return event
        return None

    @property
    def event_times(self) -> Tuple[float, ...]:
        return tuple(event.time for event in self.events)

    def final_branches(self) -> Tuple[Branch, ...]:
        return self._snapshots[-1][1]


def propagate_branches(layout: Layout, t: float) -> List[Branch]:
    """Branches of the total superposition at time t."""
    return list(BranchTimeline(layout, t).branches_at(t))


def total_wavefunction(branches: Sequence[Branch], marker_eval: Optional[Callable], r, t: float):
    """
    Sum of coefficient * packet * marker factor over branches.

    Args:
        branches: Nonempty branch list
        marker_eval: Maps a MarkerLabel to its conditional factor; None means 1
        r: Points, shape (..., 2)
        t: Time
    """
    psi, _, _ = total_jet(branches, marker_eval, r, t)
    return psi


def total_jet(branches: Sequence[Branch], marker_eval: Optional[Callable], r, t: float):
    """Value, gradient and diagonal second derivatives of the branch sum."""
    if not branches:
        raise OpticsError("total wave function of an empty branch list")
    r = np.asarray(r, dtype=float)
    psi = np.zeros(r.shape[:-1], dtype=complex)
    grad = np.zeros(r.shape, dtype=complex)
    second = np.zeros(r.shape, dtype=complex)
    for branch in branches:
        factor = 1.0 if marker_eval is None else marker_eval(branch.marker_label)
        weight = branch.coefficient * np.asarray(factor)
        if not np.any(weight):
            continue
        p, g, s = wavepacket.jet(branch.packet, r, t)
        psi = psi + weight * p
        grad = grad + weight[..., None] * g if np.ndim(weight) else grad + weight * g
        second = second + weight[..., None] * s if np.ndim(weight) else second + weight * s
    return psi, grad, second


def detector_amplitudes(layout: Layout) -> Dict[str, List[Tuple[Optional[int], complex]]]:
    """(channel, coefficient) of every branch absorbed at each detector."""
    timeline = BranchTimeline(layout, layout.horizon())
    amplitudes: Dict[str, List[Tuple[Optional[int], complex]]] = {d.label: [] for d in layout.detectors}
    for branch in timeline.final_branches():
        if branch.detector is not None:
            amplitudes[branch.detector].append((branch.channel, branch.coefficient))
    return amplitudes


def ballistic_detector(layout: Layout, channel: int) -> Optional[str]:
    """Detector reached by a channel when every splitter after the first is transparent."""
    splitters = layout.splitters
    plain = layout
    for splitter in splitters[1:]:
        plain = plain.with_element(splitter.name, active_interval=NEVER)
    timeline = BranchTimeline(plain, plain.horizon())
    for branch in timeline.final_branches():
        if branch.channel == channel and branch.detector is not None:
            return branch.detector
    return None
