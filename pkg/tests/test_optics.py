import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

import numpy as np
import pytest

from utils import wavepacket
from utils.errors import OpticsError
from utils.logger import get_logger
from utils.optics import (ALWAYS, NEVER, BranchTimeline, Element, ElementKind, Geometry, ballistic_detector,
                          build_mach_zehnder, detector_amplitudes, propagate_branches, source_packet,
                          total_jet, total_wavefunction)

logger = get_logger("TEST_OPTICS")


def _layout(bs2_interval=NEVER, reflection_factor=1j):
    geometry = Geometry()
    return build_mach_zehnder(geometry, source_packet(geometry), bs2_interval=bs2_interval,
                              reflection_factor=reflection_factor)


def test_event_times_of_square_interferometer():
    layout = _layout(ALWAYS)
    timeline = BranchTimeline(layout, layout.horizon())
    logger.info(f"event times: {timeline.event_times}")
    assert timeline.event_times == pytest.approx((0.2, 0.6, 1.0, 1.4), abs=1e-9)
    assert timeline.events[0].acting == ("BS1",)
    assert timeline.events[1].acting == ("M1", "M2")
    assert timeline.events[2].acting == ("BS2",)
    assert set(timeline.events[3].acting) == {"D1", "D2"}


def test_open_interferometer_passes_bs2_transparently():
    layout = _layout(NEVER)
    timeline = BranchTimeline(layout, layout.horizon())
    event = timeline.event_at(1.0)
    assert event is not None
    assert event.acting == ()
    assert event.transparent == ("BS2",)
    assert len(timeline.final_branches()) == 2


def test_branch_norm_and_coefficient_audit():
    for interval in (NEVER, ALWAYS):
        layout = _layout(interval)
        final = BranchTimeline(layout, layout.horizon()).final_branches()
        assert sum(abs(b.coefficient) ** 2 for b in final) == pytest.approx(1.0, abs=1e-14)
        for branch in final:
            assert branch.audit_coefficient() == pytest.approx(branch.coefficient, abs=1e-15)
            assert branch.detector in ("D1", "D2")
            assert branch.channel in (1, 2)


def test_detector_amplitudes_open():
    amplitudes = detector_amplitudes(_layout(NEVER))
    assert amplitudes["D1"] == [(1, pytest.approx(-1 / math.sqrt(2)))]
    assert amplitudes["D2"] == [(2, pytest.approx(1j / math.sqrt(2)))]


def test_detector_amplitudes_closed_cancel_at_d2():
    amplitudes = detector_amplitudes(_layout(ALWAYS))
    d1 = dict(amplitudes["D1"])
    d2 = dict(amplitudes["D2"])
    assert d1[1] == pytest.approx(-0.5)
    assert d1[2] == pytest.approx(-0.5)
    assert d2[1] == pytest.approx(-0.5j)
    assert d2[2] == pytest.approx(0.5j)
    assert abs(d2[1] + d2[2]) < 1e-15


def test_recombined_branches_share_one_packet():
    layout = _layout(ALWAYS)
    final = BranchTimeline(layout, layout.horizon()).final_branches()
    at_d2 = [b for b in final if b.detector == "D2"]
    assert len(at_d2) == 2
    np.testing.assert_allclose(at_d2[0].packet.center, at_d2[1].packet.center, atol=1e-12)
    np.testing.assert_allclose(at_d2[0].packet.wavevector, at_d2[1].packet.wavevector, atol=1e-12)


def test_branches_before_and_after_an_event():
    layout = _layout(NEVER)
    timeline = BranchTimeline(layout, layout.horizon())
    t_split = timeline.event_times[0]
    assert len(timeline.branches_at(t_split, after_events=False)) == 1
    after = timeline.branches_at(t_split, after_events=True)
    assert len(after) == 2
    assert [abs(b.coefficient) ** 2 for b in after] == pytest.approx([0.5, 0.5])
    assert sorted(b.channel for b in after) == [1, 2]
    with pytest.raises(OpticsError):
        timeline.branches_at(-1.0)


def test_propagate_branches_positions():
    layout = _layout(NEVER)
    branches = propagate_branches(layout, 0.8)
    centers = {b.channel: b.packet.center_at(0.8) for b in branches}
    np.testing.assert_allclose(centers[1], [20.0, 10.0], atol=1e-9)
    np.testing.assert_allclose(centers[2], [10.0, 20.0], atol=1e-9)


def test_total_wavefunction_of_single_branch():
    layout = _layout(NEVER)
    branches = propagate_branches(layout, 0.1)
    r = np.array([[0.2, -5.1], [0.0, -5.0]])
    np.testing.assert_allclose(total_wavefunction(branches, None, r, 0.1),
                               wavepacket.evaluate(layout.source, r, 0.1))
    psi, grad, second = total_jet(branches, None, r, 0.1)
    assert grad.shape == (2, 2)
    assert second.shape == (2, 2)
    with pytest.raises(OpticsError):
        total_wavefunction([], None, r, 0.1)


def test_activity_endpoints_are_rejected():
    element = Element("BS2", ElementKind.BEAM_SPLITTER, (20.0, 20.0), (1.0, -1.0), 5.0,
                      rho=math.sqrt(0.5), tau=math.sqrt(0.5), active_interval=(1.0, math.inf))
    assert element.is_active(1.0 + 1e-6)
    assert not element.is_active(1.0 - 1e-6)
    with pytest.raises(OpticsError):
        element.is_active(1.0)
    layout = _layout((1.0, math.inf))
    with pytest.raises(OpticsError):
        BranchTimeline(layout, layout.horizon())


def test_element_validation():
    with pytest.raises(OpticsError):
        Element("BS", ElementKind.BEAM_SPLITTER, (0.0, 0.0), (1.0, -1.0), 5.0, rho=0.5, tau=0.5)
    with pytest.raises(OpticsError):
        Element("D", ElementKind.DETECTOR, (0.0, 0.0), (0.0, 1.0), 5.0)
    with pytest.raises(OpticsError):
        Element("M", ElementKind.MIRROR, (0.0, 0.0), (0.0, 0.0), 5.0)
    with pytest.raises(OpticsError):
        _layout().element("M3")


def test_ballistic_detectors():
    for interval in (NEVER, ALWAYS):
        layout = _layout(interval)
        assert ballistic_detector(layout, 1) == "D1"
        assert ballistic_detector(layout, 2) == "D2"


def test_unbalanced_first_splitter():
    geometry = Geometry()
    layout = build_mach_zehnder(geometry, source_packet(geometry), bs1_reflectance=0.3)
    after = propagate_branches(layout, 0.4)
    weights = {b.channel: abs(b.coefficient) ** 2 for b in after}
    assert weights[1] == pytest.approx(0.3)
    assert weights[2] == pytest.approx(0.7)


def test_detector_disks_cover_the_arriving_packets():
    layout = _layout()
    assert layout.geometry.detector_radius == 6.0
    for branch in propagate_branches(layout, 1.39):
        width = branch.packet.width_at(1.4)
        logger.info(f"channel {branch.channel} arrives {width:.3f} wide")
        assert width == pytest.approx(math.sqrt(1.0 + 1.4 ** 2), rel=1e-6)
        assert 3.0 * width < layout.geometry.detector_radius
