"""Ground-truth user motion and the local polynomial motion model."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from math import comb
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .channel import ArrayGeometry, PolarState, field_boundaries

log = logging.getLogger(__name__)

THETA_CLAMP = math.pi / 2 - 1e-3


@dataclass(frozen=True)
class MotionPoly:
    """Angle/range polynomials over one sliding window.

    Coefficients live in the normalized basis tau = t'/time_scale, so that
    ``theta(t') = sum(alpha[i] * tau**i)``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    time_scale: float
    t_origin: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.array(self.alpha, dtype=float))
        object.__setattr__(self, "beta", np.array(self.beta, dtype=float))
        if self.alpha.ndim != 1 or self.beta.ndim != 1 or not len(self.alpha) or not len(self.beta):
            raise ValueError("coefficient vectors must be 1-D and non-empty")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")

    @property
    def p_alpha(self) -> int:
        return len(self.alpha) - 1

    @property
    def p_beta(self) -> int:
        return len(self.beta) - 1

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])

    def with_params(self, params: np.ndarray) -> "MotionPoly":
        na = len(self.alpha)
        return replace(self, alpha=params[:na].copy(), beta=params[na:].copy())

    def physical_alpha(self) -> np.ndarray:
        return self.alpha / self.time_scale ** np.arange(len(self.alpha))

    def physical_beta(self) -> np.ndarray:
        return self.beta / self.time_scale ** np.arange(len(self.beta))

    @classmethod
    def from_physical(cls, alpha, beta, time_scale: float, t_origin: float = 0.0) -> "MotionPoly":
        alpha = np.asarray(alpha, dtype=float)
        beta = np.asarray(beta, dtype=float)
        return cls(
            alpha * time_scale ** np.arange(len(alpha)),
            beta * time_scale ** np.arange(len(beta)),
            time_scale,
            t_origin,
        )

    @classmethod
    def constant(cls, state: PolarState, p_alpha: int, p_beta: int, time_scale: float,
                 t_origin: float = 0.0) -> "MotionPoly":
        alpha = np.zeros(p_alpha + 1)
        beta = np.zeros(p_beta + 1)
        alpha[0], beta[0] = state.theta, state.r
        return cls(alpha, beta, time_scale, t_origin)


@dataclass(frozen=True)
class ClampBounds:
    theta_max: float
    r_min: float
    r_max: float

    @classmethod
    def for_geometry(cls, geom: ArrayGeometry) -> "ClampBounds":
        fre, ray = field_boundaries(geom)
        return cls(THETA_CLAMP, 0.5 * fre, 2.0 * ray)


def horner(coefs: np.ndarray, x):
    acc = np.zeros_like(np.asarray(x, dtype=float)) + coefs[-1]
    for c in coefs[-2::-1]:
        acc = acc * x + c
    return acc


def poly_eval_raw(model: MotionPoly, t_prime):
    """Unclamped (theta, r) at local time(s) t_prime."""
    tau = np.asarray(t_prime, dtype=float) / model.time_scale
    return horner(model.alpha, tau), horner(model.beta, tau)


def clamp_states(theta, r, bounds: ClampBounds):
    """Clamp arrays into the valid region; returns (theta, r, clamped mask)."""
    th = np.clip(theta, -bounds.theta_max, bounds.theta_max)
    rr = np.clip(r, bounds.r_min, bounds.r_max)
    mask = (th != theta) | (rr != r)
    return th, rr, mask


def poly_eval(model: MotionPoly, t_prime: float, bounds: ClampBounds | None = None) -> PolarState:
    if t_prime < 0:
        raise ValueError("t_prime must be non-negative")
    theta, r = poly_eval_raw(model, t_prime)
    theta, r = float(theta), float(r)
    if bounds is None:
        bounds = ClampBounds(THETA_CLAMP, 1e-3, math.inf)
    th, rr, mask = clamp_states(theta, r, bounds)
    if mask:
        log.debug("clamped polynomial state (%g, %g) -> (%g, %g)", theta, r, th, rr)
    return PolarState(float(th), float(rr))


def shift_coefficients(coefs: np.ndarray, s: float) -> np.ndarray:
    """Coefficients of p(x + s) given those of p(x)."""
    p = len(coefs) - 1
    out = np.zeros_like(coefs, dtype=float)
    for j in range(p + 1):
        out[j] = sum(coefs[i] * comb(i, j) * s ** (i - j) for i in range(j, p + 1))
    return out


def poly_shift(model: MotionPoly, delta: float) -> MotionPoly:
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if delta == 0:
        return model
    s = delta / model.time_scale
    return replace(
        model,
        alpha=shift_coefficients(model.alpha, s),
        beta=shift_coefficients(model.beta, s),
        t_origin=model.t_origin + delta,
    )


# --------------------------------------------------------------------------
# ground truth


class TrajectoryConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    theta_min: float = -math.pi / 3
    theta_max: float = math.pi / 3
    r_min: float = 8.0
    r_max: float = 80.0

    def contains(self, theta, r) -> np.ndarray:
        theta, r = np.asarray(theta), np.asarray(r)
        return (theta >= self.theta_min) & (theta <= self.theta_max) & (r >= self.r_min) & (r <= self.r_max)


@dataclass(frozen=True)
class TruthConfig:
    region: Region = Region()
    avg_speed: float = 3.11
    max_speed: float = 4.712
    duration: float = 4.0
    waypoint_spacing: float = 2.0
    start_r: tuple[float, float] | None = None


@dataclass(frozen=True)
class TrajectoryTruth:
    x: CubicSpline
    y: CubicSpline
    duration: float
    region: Region
    avg_speed: float
    max_speed: float
    seed: int | None = None

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.duration * (1 + 1e-12)):
            raise ValueError(f"time outside [0, {self.duration}]")
        return t

    def positions(self, t) -> tuple[np.ndarray, np.ndarray]:
        t = self._check(t)
        return self.x(t), self.y(t)

    def polar(self, t) -> tuple[np.ndarray, np.ndarray]:
        x, y = self.positions(t)
        return np.arctan2(y, x), np.hypot(x, y)

    def speed(self, t) -> np.ndarray:
        t = self._check(t)
        return np.hypot(self.x(t, 1), self.y(t, 1))

    def speed_stats(self, dt: float = 1e-3) -> tuple[float, float]:
        t = np.linspace(0.0, self.duration, int(round(self.duration / dt)) + 1)
        v = self.speed(t)
        x, y = self.positions(t)
        length = float(np.sum(np.hypot(np.diff(x), np.diff(y))))
        return length / self.duration, float(v.max())

    def to_csv(self, path, dt: float = 1e-3) -> None:
        t = np.linspace(0.0, self.duration, int(round(self.duration / dt)) + 1)
        x, y = self.positions(t)
        theta, r = np.arctan2(y, x), np.hypot(x, y)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "theta", "r", "x", "y"])
            for row in zip(t, theta, r, x, y):
                wr.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, region: Region = Region()) -> "TrajectoryTruth":
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        t, x, y = data[:, 0], data[:, 3], data[:, 4]
        xs, ys = CubicSpline(t, x), CubicSpline(t, y)
        truth = cls(xs, ys, float(t[-1]), region, 0.0, 0.0)
        avg, vmax = truth.speed_stats()
        return replace(truth, avg_speed=avg, max_speed=vmax)


def truth_state(truth: TrajectoryTruth, t: float) -> PolarState:
    theta, r = truth.polar(t)
    return PolarState(float(theta), float(r))


def _random_walk(rng: np.random.Generator, cfg: TruthConfig, length: float) -> np.ndarray:
    reg = cfg.region
    span = reg.r_max - reg.r_min
    lo, hi = cfg.start_r or (reg.r_min + 0.1 * span, reg.r_min + 0.5 * span)
    th_mid = 0.5 * (reg.theta_min + reg.theta_max)
    th_half = 0.3 * (reg.theta_max - reg.theta_min)
    r0 = rng.uniform(lo, hi)
    th0 = rng.uniform(th_mid - th_half, th_mid + th_half)
    pts = [np.array([r0 * math.cos(th0), r0 * math.sin(th0)])]
    heading = rng.uniform(-math.pi, math.pi)
    margin_r = 0.05 * span
    margin_th = 0.05 * (reg.theta_max - reg.theta_min)
    inner = Region(reg.theta_min + margin_th, reg.theta_max - margin_th,
                   reg.r_min + margin_r, reg.r_max - margin_r)
    total = 0.0
    while total < length:
        for _ in range(200):
            h = heading + rng.normal(0.0, math.radians(45))
            step = cfg.waypoint_spacing * rng.uniform(0.7, 1.3)
            cand = pts[-1] + step * np.array([math.cos(h), math.sin(h)])
            if inner.contains(math.atan2(cand[1], cand[0]), math.hypot(*cand)):
                break
        else:
            raise TrajectoryConfigError("region too small for the requested path")
        heading = h
        total += step
        pts.append(cand)
    return np.array(pts)


def _path_spline(pts: np.ndarray) -> tuple[np.ndarray, CubicSpline]:
    """Waypoints joined by a clamped cubic spline in cumulative chord length."""
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    d0 = (pts[1] - pts[0]) / (s[1] - s[0])
    d1 = (pts[-1] - pts[-2]) / (s[-1] - s[-2])
    bc = ((1, d0), (1, d1))
    return s, CubicSpline(s, pts, bc_type=bc, axis=0)


def _speed_profile(rng: np.random.Generator, cfg: TruthConfig, t: np.ndarray) -> np.ndarray:
    """Smooth random speed law with the requested mean, peaking below max_speed."""
    f = np.zeros_like(t)
    for _ in range(3):
        period = rng.uniform(0.4, 2.0)
        f += rng.uniform(0.5, 1.0) * np.sin(2 * math.pi * t / period + rng.uniform(0, 2 * math.pi))
    f /= np.max(np.abs(f))
    headroom = min(0.95 * cfg.max_speed / cfg.avg_speed - 1.0, 0.5)
    v = 1.0 + headroom * f
    return cfg.avg_speed * v / np.mean(v)


def generate_truth(cfg: TruthConfig, seed: int, dt: float = 1e-3) -> TrajectoryTruth:
    """C^2 trajectory through seeded random waypoints with a time-varying speed.

    The waypoint path is re-timed along its arc length by a smooth speed law
    whose mean equals ``avg_speed``; the re-timed positions are sampled every
    ``dt`` and joined by a cubic spline in time. Equal (cfg, seed) give
    bit-identical trajectories.
    """
    if not 0 < cfg.avg_speed < cfg.max_speed:
        raise TrajectoryConfigError("need 0 < avg_speed < max_speed")
    if cfg.duration <= 0:
        raise TrajectoryConfigError("duration must be positive")
    rng = np.random.default_rng(seed)
    fine = np.linspace(0.0, cfg.duration, int(round(cfg.duration / (0.1 * dt))) + 1)
    samples = np.linspace(0.0, cfg.duration, int(round(cfg.duration / dt)) + 1)
    for _attempt in range(50):
        length = cfg.avg_speed * cfg.duration
        pts = _random_walk(rng, cfg, 1.2 * length + cfg.waypoint_spacing)
        s, path = _path_spline(pts)
        s_grid = np.linspace(0.0, s[-1], max(2000, int(s[-1] / 1e-4)))
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(path(s_grid), axis=0), axis=1))])
        v = _speed_profile(rng, cfg, fine)
        travelled = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(fine))])
        if travelled[-1] > arc[-1]:
            continue
        s_of_t = np.interp(np.interp(samples, fine, travelled), arc, s_grid)
        xy = path(s_of_t)
        xs = CubicSpline(samples, xy[:, 0])
        ys = CubicSpline(samples, xy[:, 1])
        theta, r = np.arctan2(xy[:, 1], xy[:, 0]), np.hypot(xy[:, 0], xy[:, 1])
        if not np.all(cfg.region.contains(theta, r)):
            continue
        truth = TrajectoryTruth(xs, ys, cfg.duration, cfg.region, 0.0, 0.0, seed)
        avg, vmax = truth.speed_stats()
        if abs(avg / cfg.avg_speed - 1) > 0.02 or vmax > cfg.max_speed:
            continue
        return replace(truth, avg_speed=avg, max_speed=vmax)
    raise TrajectoryConfigError("could not realize the requested speed profile in the region")
