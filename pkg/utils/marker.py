"""
Which-way markers placed in one channel of the interferometer.

Two models are supported. The discrete model is a two-level marker (up, down)
that flips with probability a^2 when the particle passes it; its beable is the
discrete value. The pointer model is a massive one-dimensional pointer whose
packet receives a kick when the particle passes; its beable is the pointer
coordinate Y and its factor enters the guidance field as a real degree of
freedom.
"""
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from . import wavepacket
from .errors import MarkerError
from .logger import get_logger
from .wavepacket import GaussianPacket

logger = get_logger("MARKER")


class MarkerLabel(str, Enum):
    NEUTRAL = "neutral"
    UP = "up"
    DOWN = "down"
    POINTER_UNFIRED = "pointer_unfired"
    POINTER_FIRED = "pointer_fired"


class MarkerKind(str, Enum):
    NONE = "none"
    DISCRETE = "discrete"
    POINTER = "pointer"


DISCRETE_LABELS = (MarkerLabel.UP, MarkerLabel.DOWN)
POINTER_LABELS = (MarkerLabel.POINTER_UNFIRED, MarkerLabel.POINTER_FIRED)


@dataclass(frozen=True)
class MarkerModel:
    """
    Marker parameters.

    ``interaction_time`` is resolved against the branch timeline when the
    scenario is built; a pointer model cannot produce its fired packet before.
    """
    kind: MarkerKind = MarkerKind.NONE
    efficiency_sq: float = 1.0
    ejection_speed: float = 400.0
    pointer_sigma: float = 1.0
    pointer_mass: float = 1.0
    placement_channel: int = 2
    interaction_position: Tuple[float, float] = (10.0, 20.0)
    interaction_time: Optional[float] = None
    birth_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", MarkerKind(self.kind))
        if not 0.0 <= self.efficiency_sq <= 1.0:
            raise MarkerError(f"efficiency_sq must lie in [0, 1], got {self.efficiency_sq}")
        if self.placement_channel not in (1, 2):
            raise MarkerError(f"placement_channel must be 1 or 2, got {self.placement_channel}")
        if self.pointer_sigma <= 0 or self.pointer_mass <= 0 or self.ejection_speed < 0:
            raise MarkerError("pointer_sigma and pointer_mass must be positive, ejection_speed non-negative")
        object.__setattr__(self, "interaction_position",
                           tuple(float(v) for v in self.interaction_position))

    @property
    def a(self) -> float:
        return math.sqrt(self.efficiency_sq)

    @property
    def b(self) -> float:
        return math.sqrt(1.0 - self.efficiency_sq)

    @property
    def has_pointer(self) -> bool:
        return self.kind == MarkerKind.POINTER

    @property
    def initial_label(self) -> MarkerLabel:
        return MarkerLabel.POINTER_UNFIRED if self.has_pointer else MarkerLabel.NEUTRAL

    def resolved(self, interaction_time: float) -> 'MarkerModel':
        return replace(self, interaction_time=float(interaction_time))

    def _require_time(self) -> float:
        if self.interaction_time is None:
            raise MarkerError("marker interaction time has not been resolved")
        return self.interaction_time


@dataclass(frozen=True)
class MarkerBeable:
    """Actual marker state: exactly the field matching the model kind is used."""
    discrete_value: Optional[MarkerLabel] = None
    pointer_position: Optional[float] = None
    interacted: bool = False


def initial_beable(model: MarkerModel, pointer_position: Optional[float] = None) -> MarkerBeable:
    if model.has_pointer:
        if pointer_position is None:
            raise MarkerError("a pointer marker needs an initial pointer position")
        return MarkerBeable(pointer_position=float(pointer_position))
    if pointer_position is not None:
        raise MarkerError(f"a {model.kind.value} marker has no pointer coordinate")
    return MarkerBeable()


def pointer_packets(model: MarkerModel) -> Tuple[GaussianPacket, GaussianPacket]:
    """
    (unfired, fired) pointer packets, both born with the source.

    The fired packet is the unfired one multiplied by exp(i M u Y) at the
    interaction time, so the pointer density is continuous across the kick.
    """
    t_i = model._require_time()
    elapsed = t_i - model.birth_time
    u = model.ejection_speed
    M = model.pointer_mass
    unfired = GaussianPacket(center=(0.0,), wavevector=(0.0,), sigma0=model.pointer_sigma,
                             mass=M, birth_time=model.birth_time)
    fired = GaussianPacket(center=(-u * elapsed,), wavevector=(M * u,), sigma0=model.pointer_sigma,
                           mass=M, phase0=-M * u * u * elapsed / 2.0, birth_time=model.birth_time)
    return unfired, fired


def unfired_packet(model: MarkerModel) -> GaussianPacket:
    return GaussianPacket(center=(0.0,), wavevector=(0.0,), sigma0=model.pointer_sigma,
                          mass=model.pointer_mass, birth_time=model.birth_time)


def pointer_jet(model: MarkerModel, label: MarkerLabel, y, t: float):
    """Pointer factor of a label with its first and second Y derivatives."""
    if label == MarkerLabel.POINTER_UNFIRED:
        packet = unfired_packet(model)
    elif label == MarkerLabel.POINTER_FIRED:
        packet = pointer_packets(model)[1]
    else:
        raise MarkerError(f"label {label.value} has no pointer packet")
    y = np.asarray(y, dtype=float)
    psi, grad, second = wavepacket.jet(packet, y[..., None], t)
    return psi, grad[..., 0], second[..., 0]


def relabel_branches(model: MarkerModel, branches: Sequence, time: float) -> Tuple:
    """
    Apply the marker interaction to the branch set at ``time``.

    Discrete: the placement-channel branch splits into b * up + a * down and
    every other branch becomes up. Pointer: the placement-channel branch
    becomes fired. Zero-coefficient branches are dropped.
    """
    from .optics import BranchEvent

    if model.kind == MarkerKind.NONE:
        return tuple(branches)

    result = []
    for branch in branches:
        in_channel = branch.channel == model.placement_channel
        if model.kind == MarkerKind.DISCRETE:
            if branch.marker_label != MarkerLabel.NEUTRAL:
                raise MarkerError("discrete marker relabels a branch that already carries a label")
            outcomes = ((MarkerLabel.UP, model.b), (MarkerLabel.DOWN, model.a)) if in_channel \
                else ((MarkerLabel.UP, 1.0),)
            for label, factor in outcomes:
                if factor == 0.0:
                    continue
                event = BranchEvent("marker", label.value, time, complex(factor))
                result.append(replace(branch, coefficient=branch.coefficient * factor,
                                      marker_label=label, history=branch.history + (event,)))
        else:
            if branch.marker_label != MarkerLabel.POINTER_UNFIRED:
                raise MarkerError("pointer marker relabels a branch that is not unfired")
            if in_channel:
                event = BranchEvent("marker", MarkerLabel.POINTER_FIRED.value, time, 1.0 + 0.0j)
                result.append(replace(branch, marker_label=MarkerLabel.POINTER_FIRED,
                                      history=branch.history + (event,)))
            else:
                result.append(branch)
    return tuple(result)


def interact(model: MarkerModel, branches: Sequence, beable: MarkerBeable,
             particle_channel: Optional[int], rng: np.random.Generator):
    """
    Marker interaction: relabel the branches and update the beable.

    The discrete beable becomes down with probability a^2 when the particle is
    in the placement channel and up otherwise. The pointer beable is moved only
    by the guidance equation; the interaction just marks it as interacted.

    Returns:
        (relabelled branches, new beable)
    """
    if beable.interacted:
        raise MarkerError("marker has already interacted with this trajectory")
    if model.has_pointer != (beable.pointer_position is not None):
        raise MarkerError(f"beable {beable} does not match a {model.kind.value} marker")

    time = model._require_time()
    new_branches = relabel_branches(model, branches, time)
    if model.kind == MarkerKind.DISCRETE:
        flipped = False
        if particle_channel == model.placement_channel:
            if model.efficiency_sq >= 1.0:
                flipped = True
            elif model.efficiency_sq > 0.0:
                flipped = bool(rng.random() < model.efficiency_sq)
        value = MarkerLabel.DOWN if flipped else MarkerLabel.UP
        return new_branches, replace(beable, discrete_value=value, interacted=True)
    return new_branches, replace(beable, interacted=True)


def conditional_factor(model: MarkerModel, beable: MarkerBeable, label: MarkerLabel, t: float):
    """Marker factor of a branch label evaluated at the actual beable."""
    if label == MarkerLabel.NEUTRAL:
        return 1.0
    if label in DISCRETE_LABELS:
        return 1.0 if beable.discrete_value == label else 0.0
    if beable.pointer_position is None:
        raise MarkerError(f"pointer label {label.value} needs a pointer beable")
    value, _, _ = pointer_jet(model, label, beable.pointer_position, t)
    return complex(value)


def label_inner_product(model: MarkerModel, first: MarkerLabel, second: MarkerLabel) -> complex:
    """<first|second> of two marker states."""
    if first == second:
        return 1.0 + 0.0j
    if first in POINTER_LABELS and second in POINTER_LABELS:
        unfired, fired = pointer_packets(model)
        packets = {MarkerLabel.POINTER_UNFIRED: unfired, MarkerLabel.POINTER_FIRED: fired}
        return wavepacket.inner_product(packets[first], packets[second])
    return 0.0 + 0.0j


def pointer_overlap(model: MarkerModel, t: float) -> float:
    """
    Position-space overlap of the pointer packets, integral |phi_f| |phi_u| dY.

    Equal to exp(-D^2 / (4 w^2)) with D = u (t - t_i) the center separation
    and w the common width; 1 before the interaction.
    """
    t_i = model._require_time()
    if t <= t_i:
        return 1.0
    w = unfired_packet(model).width_at(t)
    separation = model.ejection_speed * (t - t_i)
    return math.exp(-separation ** 2 / (4.0 * w * w))


def conditional_visibility(model: MarkerModel, t: float, y) -> np.ndarray:
    """
    Fringe visibility 2r / (1 + r^2) of the conditional wave at pointer
    coordinate Y, with r the ratio of the fired and unfired pointer moduli.
    """
    unfired, fired = pointer_packets(model)
    y = np.asarray(y, dtype=float)
    mu = np.abs(wavepacket.evaluate(unfired, y[..., None], t))
    mf = np.abs(wavepacket.evaluate(fired, y[..., None], t))
    high = np.maximum(mu, mf)
    low = np.minimum(mu, mf)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(high > 0, low / np.where(high > 0, high, 1.0), 0.0)
    return 2.0 * r / (1.0 + r * r)


def marker_outcome(model: MarkerModel, beable: MarkerBeable, t: float) -> str:
    """Readout of the marker beable: up/down, fired/unfired or none."""
    if model.kind == MarkerKind.NONE:
        return "none"
    if model.kind == MarkerKind.DISCRETE:
        return beable.discrete_value.value if beable.discrete_value is not None else "unset"
    unfired, fired = pointer_packets(model)
    y = beable.pointer_position
    t_eval = max(t, model.birth_time)
    to_fired = abs(y - float(fired.center_at(t_eval)[0]))
    to_unfired = abs(y - float(unfired.center_at(t_eval)[0]))
    return "fired" if to_fired < to_unfired else "unfired"


def is_excited(outcome: str) -> bool:
    return outcome in ("down", "fired")


def interaction_time(model: MarkerModel, timeline, tolerance: Optional[float] = None) -> float:
    """
    Time at which the placement-channel branch center passes closest to the
    interaction position.

    Args:
        model: Marker model
        timeline: Unmarked branch timeline of the layout
        tolerance: Largest accepted miss distance (defaults to the aperture)
    """
    if tolerance is None:
        tolerance = timeline.layout.geometry.aperture
    target = np.asarray(model.interaction_position)
    best = None
    for branch, start, end in timeline.branch_segments():
        if branch.channel != model.placement_channel or branch.detector is not None or end <= start:
            continue
        packet = branch.packet
        v = packet.group_velocity
        speed_sq = float(v @ v)
        c_start = packet.center_at(start)
        t_star = start if speed_sq == 0 else start + float((target - c_start) @ v) / speed_sq
        t_star = min(max(t_star, start), end)
        miss = float(np.linalg.norm(packet.center_at(t_star) - target))
        if best is None or miss < best[0]:
            best = (miss, t_star)
    if best is None or best[0] > tolerance:
        raise MarkerError(f"no channel-{model.placement_channel} branch passes within {tolerance} "
                          f"of the marker position {tuple(target)}")
    logger.debug(f"marker interaction at t={best[1]:.6f} (miss {best[0]:.3g})")
    return best[1]
