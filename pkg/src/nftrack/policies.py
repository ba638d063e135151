"""Beam selection: exploitation, Thompson-sampling probes and the baselines.

The EKF and coherence-time baselines share a polar-domain codebook. All
randomness flows through an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import (
    ArrayGeometry, PolarState, field_boundaries, los_channel, los_channel_matrix, mrt_rows,
    steering_matrix,
)
from .estimator import PosteriorBelief
from .trajectory import ClampBounds, MotionPoly, Region, clamp_states, horner

PROVENANCES = ("exploit", "ts-probe", "sweep", "codeword", "genie", "warmup", "ekf")


class PolicyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Beamformer:
    w: np.ndarray
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if abs(np.linalg.norm(self.w) - 1.0) > 1e-9:
            raise ValueError("beamformer must be unit norm")


# --------------------------------------------------------------------------
# exploitation and Thompson sampling


def _states_at(alpha, beta, model: MotionPoly, geom: ArrayGeometry, t_prime):
    """(theta, r) rows for coefficient rows (alpha, beta) at local times t_prime."""
    tau = np.asarray(t_prime, dtype=float) / model.time_scale
    theta = horner(np.asarray(alpha).T, tau)
    r = horner(np.asarray(beta).T, tau)
    theta, r, _ = clamp_states(theta, r, ClampBounds.for_geometry(geom))
    return theta, r


def exploit_beams(belief: PosteriorBelief, geom: ArrayGeometry, t_prime):
    """MRT beams toward the MLE prediction at each local time; returns (W, theta, r)."""
    t_prime = np.atleast_1d(np.asarray(t_prime, dtype=float))
    m = belief.mean
    theta, r = _states_at(m.alpha, m.beta, m, geom, t_prime)
    theta = np.broadcast_to(theta, t_prime.shape)
    r = np.broadcast_to(r, t_prime.shape)
    return mrt_rows(los_channel_matrix(geom, theta, r)), theta, r


def exploit_beam(belief: PosteriorBelief, geom: ArrayGeometry, t_prime: float) -> Beamformer:
    W, _, _ = exploit_beams(belief, geom, [t_prime])
    return Beamformer(W[0], "exploit")


def _factor(cov: np.ndarray) -> np.ndarray:
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise PolicyConfigError("posterior covariance is not positive definite") from exc


@dataclass(frozen=True)
class SamplingFactors:
    L_alpha: np.ndarray
    L_beta: np.ndarray

    @classmethod
    def of(cls, belief: PosteriorBelief) -> "SamplingFactors":
        return cls(_factor(belief.cov_alpha), _factor(belief.cov_beta))


def ts_samples(belief: PosteriorBelief, rng: np.random.Generator, count: int,
               factors: SamplingFactors | None = None):
    """``count`` independent draws; rows of (alpha, beta) coefficient arrays.

    Each draw consumes (p_alpha+1) then (p_beta+1) standard normals.
    """
    f = factors or SamplingFactors.of(belief)
    na = len(belief.mean.alpha)
    z = rng.standard_normal((count, na + len(belief.mean.beta)))
    alpha = belief.mean.alpha + z[:, :na] @ f.L_alpha.T
    beta = belief.mean.beta + z[:, na:] @ f.L_beta.T
    return alpha, beta


def ts_sample(belief: PosteriorBelief, rng: np.random.Generator) -> MotionPoly:
    alpha, beta = ts_samples(belief, rng, 1)
    return replace(belief.mean, alpha=alpha[0], beta=beta[0])


def ts_beams(belief: PosteriorBelief, geom: ArrayGeometry, t_prime, rng: np.random.Generator,
             factors: SamplingFactors | None = None):
    """One posterior draw per local time, MRT toward each; returns (W, theta, r)."""
    t_prime = np.atleast_1d(np.asarray(t_prime, dtype=float))
    alpha, beta = ts_samples(belief, rng, len(t_prime), factors)
    tau = t_prime / belief.mean.time_scale
    powers = np.power.outer(tau, np.arange(max(alpha.shape[1], beta.shape[1])))
    theta = np.einsum("ij,ij->i", alpha, powers[:, : alpha.shape[1]])
    r = np.einsum("ij,ij->i", beta, powers[:, : beta.shape[1]])
    theta, r, _ = clamp_states(theta, r, ClampBounds.for_geometry(geom))
    return mrt_rows(los_channel_matrix(geom, theta, r)), theta, r


def ts_beam(belief: PosteriorBelief, geom: ArrayGeometry, t_prime: float,
            rng: np.random.Generator) -> Beamformer:
    W, _, _ = ts_beams(belief, geom, [t_prime], rng)
    return Beamformer(W[0], "ts-probe")


# --------------------------------------------------------------------------
# codebook


@dataclass(frozen=True)
class Codebook:
    """A x S grid of near-field codewords, angle-major then range."""

    thetas: np.ndarray
    rings: np.ndarray
    W: np.ndarray = field(repr=False)
    sin_step: float
    ring_span: float

    @property
    def num_angles(self) -> int:
        return len(self.thetas)

    @property
    def num_rings(self) -> int:
        return len(self.rings)

    def __len__(self) -> int:
        return self.num_angles * self.num_rings

    def index(self, a: int, s: int) -> int:
        return a * self.num_rings + s

    def entry(self, i: int) -> tuple[float, float, Beamformer]:
        a, s = divmod(i, self.num_rings)
        return float(self.thetas[a]), float(self.rings[s]), Beamformer(self.W[i], "codeword")

    @property
    def entries(self):
        return [self.entry(i) for i in range(len(self))]

    def grid_thetas(self) -> np.ndarray:
        return np.repeat(self.thetas, self.num_rings)

    def grid_rings(self) -> np.ndarray:
        return np.tile(self.rings, self.num_angles)

    def ring_step(self, s: int) -> float:
        """Width of the range cell around ring s."""
        if self.num_rings == 1:
            return self.ring_span
        ratio = self.rings[1] / self.rings[0]
        return float(self.rings[s] * (math.sqrt(ratio) - 1.0 / math.sqrt(ratio)))

    def nearest(self, center: PolarState) -> tuple[int, int]:
        a = int(np.argmin(np.abs(np.sin(self.thetas) - math.sin(center.theta))))
        s = int(np.argmin(np.abs(self.rings - center.r)))
        return a, s

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["index", "theta_q", "r_q"])
            for i, (th, r) in enumerate(zip(self.grid_thetas(), self.grid_rings())):
                wr.writerow([i, repr(float(th)), repr(float(r))])


def build_codebook(geom: ArrayGeometry, region: Region, num_angles: int, num_rings: int) -> Codebook:
    """Cell-centered grid: uniform in sin(theta), geometric in range."""
    if num_angles < 1 or num_rings < 1:
        raise PolicyConfigError("codebook needs at least one angle and one ring")
    r_fre, r_ray = field_boundaries(geom)
    lo, hi = max(r_fre, region.r_min), min(r_ray, region.r_max)
    if not lo < hi:
        raise PolicyConfigError(
            f"region r in [{region.r_min}, {region.r_max}] m misses the near field [{r_fre:.4g}, {r_ray:.4g}] m")
    s0, s1 = math.sin(region.theta_min), math.sin(region.theta_max)
    sin_step = (s1 - s0) / num_angles
    thetas = np.arcsin(s0 + (np.arange(num_angles) + 0.5) * sin_step)
    rings = lo * (hi / lo) ** ((np.arange(num_rings) + 0.5) / num_rings)
    W = steering_matrix(geom, np.repeat(thetas, num_rings), np.tile(rings, num_angles))
    W.setflags(write=False)
    return Codebook(thetas, rings, W, sin_step, hi - lo)


def local_sweep(codebook: Codebook, center: PolarState, half_widths: tuple[int, int]) -> list[int]:
    """Codeword indices around the codeword nearest to ``center``."""
    a0, s0 = codebook.nearest(center)
    ha, hs = half_widths
    a_idx = range(max(a0 - ha, 0), min(a0 + ha, codebook.num_angles - 1) + 1)
    s_idx = range(max(s0 - hs, 0), min(s0 + hs, codebook.num_rings - 1) + 1)
    return [codebook.index(a, s) for a in a_idx for s in s_idx]


# --------------------------------------------------------------------------
# EKF baseline


@dataclass(frozen=True)
class EkfState:
    """Constant-velocity filter over [theta, theta_dot, r, r_dot]."""

    x: np.ndarray
    P: np.ndarray
    Q: np.ndarray  # per-second diagonal process noise

    def position(self) -> tuple[float, float]:
        return float(self.x[0]), float(self.x[2])


def _transition(dt: float) -> np.ndarray:
    return np.array([[1, dt, 0, 0], [0, 1, 0, 0], [0, 0, 1, dt], [0, 0, 0, 1]], dtype=float)


def ekf_predict(state: EkfState, dt: float) -> EkfState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    F = _transition(dt)
    P = F @ state.P @ F.T + np.diag(state.Q) * dt
    return EkfState(F @ state.x, 0.5 * (P + P.T), state.Q)


def ekf_measurement_noise(codebook: Codebook, a: int, s: int) -> np.ndarray:
    # uniform quantization error over one grid cell
    dth = codebook.sin_step / max(math.cos(codebook.thetas[a]), 1e-6)
    return np.diag([dth**2 / 12.0, codebook.ring_step(s) ** 2 / 12.0])


_H = np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]])


def ekf_update(state: EkfState, z: np.ndarray, R: np.ndarray) -> EkfState:
    S = _H @ state.P @ _H.T + R
    K = np.linalg.solve(S, _H @ state.P).T
    x = state.x + K @ (z - _H @ state.x)
    A = np.eye(4) - K @ _H
    P = A @ state.P @ A.T + K @ R @ K.T  # Joseph form
    return EkfState(x, 0.5 * (P + P.T), state.Q)


@dataclass
class SweepResult:
    index: int
    y: np.ndarray
    gains: np.ndarray


def ekf_sweep_update(state: EkfState, codebook: Codebook, transmit, check: bool = False):
    """Sweep the whole codebook, then update with the strongest codeword's position.

    ``transmit(W)`` sends the rows of W on consecutive symbols and returns
    (received samples, normalized gains).
    """
    y, gains = transmit(codebook.W)
    power = np.abs(y) ** 2
    best = int(np.argmax(power))
    if check:
        brute = max(range(len(y)), key=lambda i: abs(complex(y[i])) ** 2)
        if power[brute] > power[best]:
            raise AssertionError("sweep picked a non-maximal codeword")
    a, s = divmod(best, codebook.num_rings)
    z = np.array([codebook.thetas[a], codebook.rings[s]])
    new = ekf_update(state, z, ekf_measurement_noise(codebook, a, s))
    return new, SweepResult(best, y, np.asarray(gains))


# --------------------------------------------------------------------------
# coherence-time baseline


@dataclass
class CoherenceTimer:
    tolerable_loss: float
    speed: float = 0.0
    expiry: float = 0.0
    half_widths: tuple[int, int] = (2, 1)

    def __post_init__(self):
        if not 0 < self.tolerable_loss < 1:
            raise PolicyConfigError("tolerable gain loss must lie in (0, 1)")


def coherence_expiry(w: np.ndarray, geom: ArrayGeometry, start: PolarState, rates: tuple[float, float],
                     tolerable_loss: float, symbol_time: float, cap: float, chunk: int = 512) -> float:
    """Time until the held beam's predicted gain drops below (1 - loss) of its start value.

    The user is extrapolated linearly in (theta, r) at ``rates``; gain is
    evaluated against the LoS channel every symbol until ``cap``.
    """
    if not 0 < tolerable_loss < 1:
        raise PolicyConfigError("tolerable gain loss must lie in (0, 1)")
    wd, rd = rates
    if wd == 0 and rd == 0:
        return cap
    h0 = los_channel(geom, start)
    g0 = abs(np.vdot(h0, w)) ** 2 / np.vdot(h0, h0).real
    floor = (1.0 - tolerable_loss) * g0
    bounds = ClampBounds.for_geometry(geom)
    n_total = int(math.floor(cap / symbol_time))
    for first in range(1, n_total + 1, chunk):
        t = np.arange(first, min(first + chunk, n_total + 1)) * symbol_time
        th, r, _ = clamp_states(start.theta + wd * t, start.r + rd * t, bounds)
        # |b^H w|^2 is the normalized gain against the LoS channel
        g = np.abs(steering_matrix(geom, th, r).conj() @ w) ** 2
        below = np.flatnonzero(g < floor)
        if below.size:
            return float(t[below[0]])
    return cap
