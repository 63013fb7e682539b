"""
Free dispersive Gaussian wave packets in closed form (units hbar = 1).

A packet born at time t0 with center c0, wavevector k, real width sigma0 and
mass m is

    psi(r, t) = (pi sigma0^2)^(-d/4) (1 + i tau)^(-d/2)
                exp(-|r - c(t)|^2 / (2 s) + i k.(r - c(t)) + i (|k|^2 (t - t0) / (2 m) + phase0))

    tau = (t - t0) / (m sigma0^2),  s = sigma0^2 (1 + i tau),  c(t) = c0 + k (t - t0) / m

The gradient is psi * g with g = -(r - c(t)) / s + i k and each diagonal
second derivative is psi * (g_j^2 - 1 / s). The module is dimension agnostic:
the particle packets are 2D and the marker pointer packets 1D.
"""
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from .errors import PacketError
from .logger import get_logger

logger = get_logger("WAVEPACKET")

# Moduli below this are clamped to exactly zero.
AMPLITUDE_FLOOR = 1e-300


@dataclass(frozen=True)
class GaussianPacket:
    """Immutable parameters of one free Gaussian packet."""
    center: Tuple[float, ...]
    wavevector: Tuple[float, ...]
    sigma0: float = 1.0
    mass: float = 1.0
    phase0: float = 0.0
    birth_time: float = 0.0

    def __post_init__(self):
        center = tuple(float(c) for c in np.atleast_1d(np.asarray(self.center, dtype=float)))
        wavevector = tuple(float(k) for k in np.atleast_1d(np.asarray(self.wavevector, dtype=float)))
        if len(center) != len(wavevector):
            raise PacketError(f"center has {len(center)} components but wavevector has {len(wavevector)}")
        if not np.all(np.isfinite(center + wavevector)):
            raise PacketError("packet center and wavevector must be finite")
        if not (np.isfinite(self.sigma0) and self.sigma0 > 0):
            raise PacketError(f"sigma0 must be positive, got {self.sigma0}")
        if not (np.isfinite(self.mass) and self.mass > 0):
            raise PacketError(f"mass must be positive, got {self.mass}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "wavevector", wavevector)
        object.__setattr__(self, "sigma0", float(self.sigma0))
        object.__setattr__(self, "mass", float(self.mass))
        object.__setattr__(self, "phase0", float(self.phase0))
        object.__setattr__(self, "birth_time", float(self.birth_time))

    @property
    def dimension(self) -> int:
        return len(self.center)

    @property
    def group_velocity(self) -> np.ndarray:
        return np.asarray(self.wavevector) / self.mass

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.group_velocity))

    def center_at(self, t: float) -> np.ndarray:
        """Center of |psi|^2 at time t."""
        return np.asarray(self.center) + self.group_velocity * (t - self.birth_time)

    def width_at(self, t: float) -> float:
        """Real width sigma0 sqrt(1 + tau^2); |psi|^2 is proportional to exp(-|r - c|^2 / width^2)."""
        tau = (t - self.birth_time) / (self.mass * self.sigma0 ** 2)
        return self.sigma0 * float(np.sqrt(1.0 + tau * tau))


def _check_time(packet: GaussianPacket, t: float):
    if t < packet.birth_time:
        raise PacketError(f"packet born at t={packet.birth_time} evaluated at earlier t={t}")


def _points(packet: GaussianPacket, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape[-1:] != (packet.dimension,):
        raise PacketError(f"points of shape {r.shape} do not match a {packet.dimension}D packet")
    return r


def jet(packet: GaussianPacket, r, t: float):
    """
    Evaluate psi together with its exact derivatives.

    Args:
        packet: Packet to evaluate
        r: Points, shape (..., d)
        t: Time, not earlier than the packet's birth

    Returns:
        (psi, gradient, second) with shapes (...), (..., d) and (..., d);
        ``second`` holds the diagonal second derivatives d^2 psi / dx_j^2.
    """
    _check_time(packet, t)
    r = _points(packet, r)
    d = packet.dimension
    tau = (t - packet.birth_time) / (packet.mass * packet.sigma0 ** 2)
    s = packet.sigma0 ** 2 * (1.0 + 1j * tau)
    k = np.asarray(packet.wavevector)

    disp = r - packet.center_at(t)
    k_sq = float(k @ k)
    exponent = (-np.sum(disp * disp, axis=-1) / (2.0 * s)
                + 1j * (disp @ k)
                + 1j * (k_sq * (t - packet.birth_time) / (2.0 * packet.mass) + packet.phase0))
    norm = (np.pi * packet.sigma0 ** 2) ** (-d / 4.0) * (1.0 + 1j * tau) ** (-d / 2.0)
    psi = norm * np.exp(exponent)
    psi = np.where(np.abs(psi) < AMPLITUDE_FLOOR, 0.0 + 0.0j, psi)

    g = -disp / s + 1j * k
    gradient = psi[..., None] * g
    second = psi[..., None] * (g * g - 1.0 / s)
    return psi, gradient, second


def evaluate(packet: GaussianPacket, r, t: float):
    """psi(r, t); a scalar for a single point, an array for stacked points."""
    psi, _, _ = jet(packet, r, t)
    return psi


def gradient(packet: GaussianPacket, r, t: float):
    """Exact spatial gradient of psi, shape (..., d)."""
    _, grad, _ = jet(packet, r, t)
    return grad


def laplacian(packet: GaussianPacket, r, t: float):
    """Exact Laplacian of psi."""
    _, _, second = jet(packet, r, t)
    return np.sum(second, axis=-1)


def width(packet: GaussianPacket, t: float) -> float:
    _check_time(packet, t)
    return packet.width_at(t)


def center(packet: GaussianPacket, t: float) -> np.ndarray:
    _check_time(packet, t)
    return packet.center_at(t)


def peak_modulus(packet: GaussianPacket, t: float) -> float:
    """|psi| at the packet center: (pi w(t)^2)^(-d/4)."""
    w = width(packet, t)
    return float((np.pi * w * w) ** (-packet.dimension / 4.0))


def mirrored(packet: GaussianPacket, point, normal) -> GaussianPacket:
    """
    Mirror image of a packet through the line (plane) through ``point`` with
    unit ``normal``. Free evolution commutes with the reflection, so the image
    evaluated at r equals the original evaluated at the reflected point.
    """
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    p = np.asarray(point, dtype=float)
    c = np.asarray(packet.center)
    k = np.asarray(packet.wavevector)
    new_center = c - 2.0 * ((c - p) @ n) * n
    new_k = k - 2.0 * (k @ n) * n
    return replace(packet, center=tuple(new_center), wavevector=tuple(new_k))


def inner_product(a: GaussianPacket, b: GaussianPacket) -> complex:
    """
    Exact <a|b> for two packets sharing sigma0, mass and birth time.

    Free evolution is unitary, so the value is the same at every time. At
    birth both are real-width Gaussians and

        <a|b> = exp(-|D|^2 / (4 sigma^2) - |K|^2 sigma^2 / 4
                    + i ((k_a + k_b).(c_a - c_b) / 2 + phase_b - phase_a))

    with D = c_b - c_a and K = k_b - k_a.
    """
    if a.dimension != b.dimension:
        raise PacketError("inner product of packets with different dimensions")
    if not (np.isclose(a.sigma0, b.sigma0, rtol=0, atol=1e-14)
            and np.isclose(a.mass, b.mass, rtol=0, atol=1e-14)
            and np.isclose(a.birth_time, b.birth_time, rtol=0, atol=1e-14)):
        raise PacketError("closed-form inner product needs equal sigma0, mass and birth time")

    ca, cb = np.asarray(a.center), np.asarray(b.center)
    ka, kb = np.asarray(a.wavevector), np.asarray(b.wavevector)
    delta = cb - ca
    kappa = kb - ka
    sigma_sq = a.sigma0 ** 2
    real_part = -(delta @ delta) / (4.0 * sigma_sq) - (kappa @ kappa) * sigma_sq / 4.0
    imag_part = 0.5 * ((ka + kb) @ (ca - cb)) + b.phase0 - a.phase0
    return complex(np.exp(real_part + 1j * imag_part))
