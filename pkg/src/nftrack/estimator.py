"""Sliding-window maximum-likelihood fit of the motion polynomials.

The cost is the non-linear least-squares objective J = sum |y_u - mu_u|^2
over the feedback window. It is minimized with Adam, and the Gauss-Newton
observed Fisher information at the optimum gives the Gaussian posterior that
Thompson sampling draws from.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ._kernels import los_response
from .channel import ArrayGeometry
from .trajectory import ClampBounds, MotionPoly, clamp_states


@dataclass(frozen=True)
class Observation:
    u: int
    t: float
    w: np.ndarray
    y: complex

    def __post_init__(self):
        if abs(np.linalg.norm(self.w) - 1.0) > 1e-9:
            raise ValueError("observation beamformer must be unit norm")


@dataclass
class Window:
    """Feedback history as stacked arrays (global times, beams, samples)."""

    u: np.ndarray
    t: np.ndarray
    W: np.ndarray
    y: np.ndarray

    @classmethod
    def from_observations(cls, obs) -> "Window":
        obs = list(obs)
        if not obs:
            raise ValueError("empty window")
        return cls(
            np.array([o.u for o in obs], dtype=np.int64),
            np.array([o.t for o in obs], dtype=float),
            np.array([o.w for o in obs], dtype=np.complex128),
            np.array([o.y for o in obs], dtype=np.complex128),
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, idx) -> "Window":
        return Window(self.u[idx], self.t[idx], self.W[idx], self.y[idx])

    def observations(self) -> list[Observation]:
        return [Observation(int(u), float(t), w, complex(y)) for u, t, w, y in zip(self.u, self.t, self.W, self.y)]


def _as_window(window) -> Window:
    if isinstance(window, Window):
        return window
    if isinstance(window, Observation):
        return Window.from_observations([window])
    return Window.from_observations(window)


def basis_matrix(tau: np.ndarray, order: int) -> np.ndarray:
    return np.power.outer(np.asarray(tau, dtype=float), np.arange(order + 1))


@dataclass
class Response:
    mu: np.ndarray
    d_theta: np.ndarray
    d_r: np.ndarray
    phi_alpha: np.ndarray
    phi_beta: np.ndarray
    clamped: int


@dataclass
class _Prepared:
    """Per-window quantities that stay fixed while the coefficients move."""

    win: Window
    tau: np.ndarray
    phi_alpha: np.ndarray
    phi_beta: np.ndarray
    w_re: np.ndarray
    w_im: np.ndarray
    bounds: ClampBounds

    @classmethod
    def of(cls, model: MotionPoly, geom: ArrayGeometry, win: Window) -> "_Prepared":
        tau = (win.t - model.t_origin) / model.time_scale
        W = win.W
        return cls(win, tau, basis_matrix(tau, model.p_alpha), basis_matrix(tau, model.p_beta),
                   np.ascontiguousarray(W.real), np.ascontiguousarray(W.imag), ClampBounds.for_geometry(geom))


def _respond(model: MotionPoly, geom: ArrayGeometry, prep: _Prepared, with_grad: bool) -> Response:
    theta = prep.phi_alpha @ model.alpha
    r = prep.phi_beta @ model.beta
    theta, r, mask = clamp_states(theta, r, prep.bounds)
    mu, d_theta, d_r = los_response(
        np.ascontiguousarray(theta), np.ascontiguousarray(r), prep.w_re, prep.w_im,
        geom.positions, geom.wavelength, with_grad,
    )
    if mask.any():
        # clamped samples do not move with the coefficients
        d_theta[mask] = 0
        d_r[mask] = 0
    return Response(mu, d_theta, d_r, prep.phi_alpha, prep.phi_beta, int(mask.sum()))


def model_response(model: MotionPoly, geom: ArrayGeometry, window, with_grad: bool = True) -> Response:
    """mu_u and its derivatives w.r.t. the instantaneous (theta, r)."""
    win = _as_window(window)
    return _respond(model, geom, _Prepared.of(model, geom, win), with_grad)


def predict_mu(model: MotionPoly, geom: ArrayGeometry, obs: Observation) -> complex:
    return complex(model_response(model, geom, [obs], with_grad=False).mu[0])


def cost_J(model: MotionPoly, geom: ArrayGeometry, window) -> float:
    win = _as_window(window)
    e = win.y - model_response(model, geom, win, with_grad=False).mu
    return float(np.sum(e.real**2 + e.imag**2))


def _cost_and_grad(model, geom, prep: _Prepared):
    res = _respond(model, geom, prep, True)
    e = prep.win.y - res.mu
    J = float(np.sum(e.real**2 + e.imag**2))
    # d|e|^2/dx = -2 Re{conj(e) dmu/dx}
    gt = -2.0 * np.real(np.conj(e) * res.d_theta)
    gr = -2.0 * np.real(np.conj(e) * res.d_r)
    return J, np.concatenate([res.phi_alpha.T @ gt, res.phi_beta.T @ gr])


def grad_J(model: MotionPoly, geom: ArrayGeometry, window) -> np.ndarray:
    """Gradient of J w.r.t. the normalized-basis coefficients (alpha, beta)."""
    win = _as_window(window)
    return _cost_and_grad(model, geom, _Prepared.of(model, geom, win))[1]


# --------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamConfig:
    rho1: float = 0.9
    rho2: float = 0.999
    eta_alpha: float = 1e-4
    eta_beta: float = 1e-5
    eps: float = 1e-12
    max_iter: int = 300
    rel_tol: float = 1e-6
    basis: str = "legendre"
    # J below zero_tol * sum|y|^2 is round-off; stop rather than step off the fit
    zero_tol: float = 1e-24

    def __post_init__(self):
        if not (0 < self.rho1 < 1 and 0 < self.rho2 < 1):
            raise ValueError("decay factors must lie in (0, 1)")
        if self.basis not in ("monomial", "legendre"):
            raise ValueError(f"unknown basis {self.basis!r}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), 0)


def adam_step(state: AdamState, grad: np.ndarray, eta: np.ndarray, cfg: AdamConfig) -> np.ndarray:
    """Advance the moment estimates in place and return the parameter update."""
    state.step += 1
    state.m = cfg.rho1 * state.m + (1 - cfg.rho1) * grad
    state.v = cfg.rho2 * state.v + (1 - cfg.rho2) * grad * grad
    m_hat = state.m / (1 - cfg.rho1**state.step)
    v_hat = state.v / (1 - cfg.rho2**state.step)
    return -eta * m_hat / (np.sqrt(v_hat) + cfg.eps)


@lru_cache(maxsize=None)
def _legendre_to_monomial(order: int) -> np.ndarray:
    M = np.zeros((order + 1, order + 1))
    for i in range(order + 1):
        c = np.polynomial.Legendre.basis(i, domain=[0, 1]).convert(kind=np.polynomial.Polynomial).coef
        M[: len(c), i] = c
    M.setflags(write=False)
    return M


def legendre_to_monomial(order: int) -> np.ndarray:
    """Columns are monomial coefficients of shifted Legendre polynomials on [0, 1]."""
    return _legendre_to_monomial(order).copy()


def _internal_basis(model: MotionPoly, basis: str) -> np.ndarray:
    na, nb = model.p_alpha + 1, model.p_beta + 1
    M = np.zeros((na + nb, na + nb))
    if basis == "legendre":
        M[:na, :na] = legendre_to_monomial(model.p_alpha)
        M[na:, na:] = legendre_to_monomial(model.p_beta)
    else:
        M[:] = np.eye(na + nb)
    return M


@dataclass
class FitDiagnostics:
    J_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    best_J: float = math.inf
    best_iter: int = 0


def adam_fit(initial: MotionPoly, geom: ArrayGeometry, window, cfg: AdamConfig = AdamConfig()):
    """Minimize J from ``initial``; returns (best model, diagnostics)."""
    win = _as_window(window)
    prep = _Prepared.of(initial, geom, win)
    M = _internal_basis(initial, cfg.basis)
    z = np.linalg.solve(M, initial.params)
    na = initial.p_alpha + 1
    eta = np.full(len(z), cfg.eta_beta)
    eta[:na] = cfg.eta_alpha
    state = AdamState.zeros(len(z))
    diag = FitDiagnostics()
    best, prev = initial, None
    model = initial
    J_zero = cfg.zero_tol * float(np.sum(win.y.real**2 + win.y.imag**2))
    for it in range(cfg.max_iter + 1):
        J, g = _cost_and_grad(model, geom, prep)
        diag.J_trace.append(J)
        if J < diag.best_J:
            diag.best_J, diag.best_iter, best = J, it, model
        if J <= J_zero:
            diag.converged = True
            break
        if prev is not None and abs(J - prev) / max(prev, 1e-30) < cfg.rel_tol:
            diag.converged = True
            break
        if it == cfg.max_iter:
            break
        prev = J
        z = z + adam_step(state, M.T @ g, eta, cfg)
        model = initial.with_params(M @ z)
    diag.iterations = len(diag.J_trace) - 1
    return best, diag


# --------------------------------------------------------------------------
# Fisher information and posterior


def observed_fim(model: MotionPoly, geom: ArrayGeometry, window, noise_var: float):
    """Gauss-Newton observed information blocks (fim_alpha, fim_beta)."""
    na, nb = model.p_alpha + 1, model.p_beta + 1
    win = _as_window(window) if len(window) else None
    if win is None:
        return np.zeros((na, na)), np.zeros((nb, nb))
    res = model_response(model, geom, win)
    wt = np.abs(res.d_theta) ** 2
    wr = np.abs(res.d_r) ** 2
    fa = (2.0 / noise_var) * (res.phi_alpha.T * wt) @ res.phi_alpha
    fb = (2.0 / noise_var) * (res.phi_beta.T * wr) @ res.phi_beta
    return 0.5 * (fa + fa.T), 0.5 * (fb + fb.T)


def default_regularizer(fim: np.ndarray) -> float:
    return 1e-8 * np.trace(fim) / len(fim) + 1e-12


@dataclass(frozen=True)
class PosteriorBelief:
    mean: MotionPoly
    cov_alpha: np.ndarray
    cov_beta: np.ndarray
    noise_var: float
    J: float = math.nan
    iterations: int = 0
    converged: bool = True

    @classmethod
    def point_mass(cls, mean: MotionPoly, noise_var: float = 1.0) -> "PosteriorBelief":
        na, nb = mean.p_alpha + 1, mean.p_beta + 1
        return cls(mean, np.zeros((na, na)), np.zeros((nb, nb)), noise_var)


def _reg_inverse(fim: np.ndarray, reg: float | None) -> np.ndarray:
    lam = default_regularizer(fim) if reg is None else reg
    A = fim + lam * np.eye(len(fim))
    # scale to unit diagonal before inverting; the blocks span many decades
    d = 1.0 / np.sqrt(np.diag(A))
    cov = d[:, None] * np.linalg.inv(d[:, None] * A * d[None, :]) * d[None, :]
    return 0.5 * (cov + cov.T)


def posterior(model: MotionPoly, fims, noise_var: float, reg: float | None = None,
              diagnostics: FitDiagnostics | None = None) -> PosteriorBelief:
    fa, fb = fims
    diag = diagnostics or FitDiagnostics(best_J=math.nan, converged=True)
    return PosteriorBelief(
        model, _reg_inverse(fa, reg), _reg_inverse(fb, reg), noise_var,
        diag.best_J, diag.iterations, diag.converged,
    )


def plugin_noise_var(J_min: float, count: int) -> float:
    return J_min / max(count, 1)


def write_fit_diagnostics(path, diag: FitDiagnostics, fims=None) -> None:
    conds = [np.linalg.cond(f) if f is not None and np.any(f) else math.inf for f in (fims or (None, None))]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "J", "converged", "cond_fim_alpha", "cond_fim_beta"])
        for i, J in enumerate(diag.J_trace):
            wr.writerow([i, repr(J), int(diag.converged), repr(conds[0]), repr(conds[1])])
