"""Near-field ULA geometry, steering vectors and LoS/NLoS channel synthesis."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class ChannelDomainError(ValueError):
    """Raised for geometries where the channel model is undefined."""


@dataclass(frozen=True)
class ArrayGeometry:
    num_elements: int
    spacing: float
    carrier: float
    offsets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_elements < 1:
            raise ValueError("num_elements must be >= 1")
        if self.spacing <= 0 or self.carrier <= 0:
            raise ValueError("spacing and carrier must be positive")
        n = np.arange(self.num_elements)
        offsets = (2 * n - self.num_elements + 1) / 2.0
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def half_wavelength(cls, num_elements: int, carrier: float) -> "ArrayGeometry":
        return cls(num_elements, SPEED_OF_LIGHT / carrier / 2.0, carrier)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier

    @property
    def aperture(self) -> float:
        return (self.num_elements - 1) * self.spacing

    @property
    def positions(self) -> np.ndarray:
        """Element y-coordinates in meters (array along the y-axis)."""
        return self.offsets * self.spacing


@dataclass(frozen=True)
class PolarState:
    theta: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ChannelDomainError(f"range must be positive, got {self.r}")
        if not -math.pi / 2 < self.theta < math.pi / 2:
            raise ChannelDomainError(f"angle outside (-pi/2, pi/2): {self.theta}")

    @property
    def xy(self) -> tuple[float, float]:
        return self.r * math.cos(self.theta), self.r * math.sin(self.theta)

    @classmethod
    def from_xy(cls, x: float, y: float) -> "PolarState":
        return cls(math.atan2(y, x), math.hypot(x, y))


@dataclass(frozen=True)
class Scatterer:
    theta: float
    r1: float
    reflection: complex = 0.1 + 0j

    def __post_init__(self):
        if not self.r1 > 0:
            raise ChannelDomainError("scatterer distance r1 must be positive")


def _range_offsets(geom: ArrayGeometry, theta: float, r: float) -> np.ndarray:
    """r^(n) - r for every element, computed without cancellation."""
    pos = geom.positions
    num = pos * pos - 2.0 * r * math.sin(theta) * pos
    radicand = r * r + num
    if np.any(radicand <= 0):
        raise ChannelDomainError("non-positive radicand in element distance")
    return num / (np.sqrt(radicand) + r)


def element_distance(geom: ArrayGeometry, state: PolarState, n: int) -> float:
    if not 0 <= n < geom.num_elements:
        raise IndexError(f"element index {n} out of range")
    p = geom.offsets[n] * geom.spacing
    radicand = state.r**2 + p * p - 2.0 * state.r * math.sin(state.theta) * p
    if radicand <= 0:
        raise ChannelDomainError("non-positive radicand in element distance")
    return math.sqrt(radicand)


def _wrapped_phase(distance_over_lambda: np.ndarray | float) -> np.ndarray | float:
    return 2.0 * math.pi * np.fmod(distance_over_lambda, 1.0)


def steering_vector(geom: ArrayGeometry, state: PolarState) -> np.ndarray:
    delta = _range_offsets(geom, state.theta, state.r)
    phase = _wrapped_phase(delta / geom.wavelength)
    return np.exp(-1j * phase) / math.sqrt(geom.num_elements)


def path_gain(geom: ArrayGeometry, r: float) -> float:
    return geom.wavelength / (4.0 * math.pi * r)


def los_channel(geom: ArrayGeometry, state: PolarState) -> np.ndarray:
    lam = geom.wavelength
    # global and per-element phases are wrapped separately before exponentiation
    glob = _wrapped_phase(state.r / lam)
    delta = _range_offsets(geom, state.theta, state.r)
    phase = glob + _wrapped_phase(delta / lam)
    return path_gain(geom, state.r) * np.exp(-1j * phase) / math.sqrt(geom.num_elements)


def scatterer_ue_distance(state: PolarState, sc: Scatterer) -> float:
    r2sq = state.r**2 + sc.r1**2 - 2.0 * state.r * sc.r1 * math.cos(state.theta - sc.theta)
    if r2sq <= 1e-24:
        raise ChannelDomainError("user coincides with a scatterer")
    return math.sqrt(r2sq)


def nlos_channel(geom: ArrayGeometry, state: PolarState, scatterers) -> np.ndarray:
    h = np.zeros(geom.num_elements, dtype=np.complex128)
    lam = geom.wavelength
    for sc in scatterers:
        r2 = scatterer_ue_distance(state, sc)
        g = lam * sc.reflection / (4.0 * math.pi * sc.r1 * r2)
        if g == 0:
            continue
        phase = _wrapped_phase((sc.r1 + r2) / lam)
        h += g * np.exp(-1j * phase) * steering_vector(geom, PolarState(sc.theta, sc.r1))
    return h


def full_channel(geom: ArrayGeometry, state: PolarState, scatterers=()) -> np.ndarray:
    h = los_channel(geom, state)
    if scatterers:
        h = h + nlos_channel(geom, state, scatterers)
    return h


def field_boundaries(geom: ArrayGeometry) -> tuple[float, float]:
    """Fresnel and Rayleigh distances bounding the radiative near field."""
    if geom.num_elements < 2:
        raise ValueError("field boundaries need at least two elements")
    D, lam = geom.aperture, geom.wavelength
    return 0.5 * math.sqrt(D**3 / lam), 2.0 * D**2 / lam


def receive_symbol(h: np.ndarray, w: np.ndarray, x: complex = 1.0, noise: complex = 0.0) -> complex:
    if abs(np.linalg.norm(w) - 1.0) > 1e-9:
        raise ValueError("beamformer must be unit norm")
    return complex(np.vdot(h, w) * x + noise)


def normalized_gain(h: np.ndarray, w: np.ndarray) -> float:
    """|h^H w|^2 / ||h||^2 for a unit-norm beamformer."""
    hh = float(np.vdot(h, h).real)
    if hh == 0:
        return 0.0
    return min(1.0, abs(np.vdot(h, w)) ** 2 / hh)


def mrt(h: np.ndarray) -> np.ndarray:
    return h / np.linalg.norm(h)


# --------------------------------------------------------------------------
# batched forms: one row per (theta, r) pair


def _range_offsets_matrix(geom: ArrayGeometry, theta: np.ndarray, r: np.ndarray) -> np.ndarray:
    pos = geom.positions[None, :]
    r = np.asarray(r, dtype=float)[:, None]
    num = pos * pos - 2.0 * r * np.sin(np.asarray(theta, dtype=float))[:, None] * pos
    radicand = r * r + num
    if np.any(radicand <= 0):
        raise ChannelDomainError("non-positive radicand in element distance")
    return num / (np.sqrt(radicand) + r)


def steering_matrix(geom: ArrayGeometry, theta, r) -> np.ndarray:
    delta = _range_offsets_matrix(geom, theta, r)
    return np.exp(-1j * _wrapped_phase(delta / geom.wavelength)) / math.sqrt(geom.num_elements)


def los_channel_matrix(geom: ArrayGeometry, theta, r) -> np.ndarray:
    lam = geom.wavelength
    r = np.asarray(r, dtype=float)
    phase = _wrapped_phase(r / lam)[:, None] + _wrapped_phase(_range_offsets_matrix(geom, theta, r) / lam)
    gain = lam / (4.0 * math.pi * r)
    return gain[:, None] * np.exp(-1j * phase) / math.sqrt(geom.num_elements)


def full_channel_matrix(geom: ArrayGeometry, theta, r, scatterers=()) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    r = np.asarray(r, dtype=float)
    H = los_channel_matrix(geom, theta, r)
    lam = geom.wavelength
    for sc in scatterers:
        r2 = np.sqrt(r**2 + sc.r1**2 - 2.0 * r * sc.r1 * np.cos(theta - sc.theta))
        if np.any(r2 <= 1e-12):
            raise ChannelDomainError("user coincides with a scatterer")
        g = lam * sc.reflection / (4.0 * math.pi * sc.r1 * r2)
        coef = g * np.exp(-1j * _wrapped_phase((sc.r1 + r2) / lam))
        H = H + coef[:, None] * steering_vector(geom, PolarState(sc.theta, sc.r1))[None, :]
    return H


def mrt_rows(H: np.ndarray) -> np.ndarray:
    return H / np.linalg.norm(H, axis=1, keepdims=True)


def normalized_gains(H: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Row-wise |h^H w|^2 / ||h||^2."""
    num = np.abs(np.einsum("ij,ij->i", H.conj(), W)) ** 2
    den = np.einsum("ij,ij->i", H.conj(), H).real
    return np.minimum(num / den, 1.0)
