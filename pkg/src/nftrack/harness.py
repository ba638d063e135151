"""End-to-end tracking protocol: warm-up, per-symbol transmission, feedback
scheduling and per-interval MLE updates, plus the sweep executor."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .channel import (
    ArrayGeometry, PolarState, Scatterer, full_channel_matrix, los_channel, los_channel_matrix, mrt_rows,
    normalized_gains,
)
from .estimator import (
    AdamConfig, AdamState, FitDiagnostics, PosteriorBelief, Window, _internal_basis, _Prepared, _respond, adam_fit, adam_step,
    basis_matrix, model_response, observed_fim, plugin_noise_var, posterior,
)
from .policies import (
    CoherenceTimer, EkfState, SamplingFactors, build_codebook, coherence_expiry, ekf_predict, ekf_sweep_update,
    exploit_beams, local_sweep, ts_beams,
)
from .trajectory import MotionPoly, Region, TrajectoryTruth, poly_eval_raw, poly_shift

log = logging.getLogger(__name__)

TRACK_LOSS_GAIN = 0.01
POLICIES = ("ts", "exploit", "ekf", "coherence", "genie")


class ProtocolConfigError(ValueError):
    pass


class WarmupError(RuntimeError):
    """The warm-up fit did not lock onto the trajectory."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class WarmupSpec:
    angle_dither_deg: float = 0.5
    range_dither_frac: float = 0.02
    # how well the acquisition stage knows the start position
    init_angle_std_deg: float = 0.05
    init_range_std_frac: float = 0.002
    max_rounds: int = 4
    accept_ratio: float = 1.5
    fail_ratio: float = 3.0
    max_iter: int = 2000
    magnitude_iter: int = 300


@dataclass(frozen=True)
class PolicySpec:
    name: str = "ts"
    codebook_angles: int | None = None  # None -> N
    codebook_rings: int = 8
    ekf_period: float = 0.040
    ekf_q: tuple[float, float, float, float] = (1e-6, 1e-4, 1e-4, 1e-2)
    coherence_loss: float = 0.5
    coherence_cap: float = 0.025
    coherence_half_widths: tuple[int, int] = (2, 1)

    def __post_init__(self):
        if self.name not in POLICIES:
            raise ProtocolConfigError(f"unknown policy {self.name!r}; choose from {', '.join(POLICIES)}")


@dataclass(frozen=True)
class ProtocolConfig:
    symbol_time: float = 1.0 / 30e3
    interval: float = 0.010
    feedback_ratio: float = 1.0
    history: float = 0.0666
    duration: float = 4.0
    snr_db: float = 20.0
    p_alpha: int = 3
    p_beta: int = 6
    adam: AdamConfig = AdamConfig()
    warmup: WarmupSpec = WarmupSpec()
    plugin_noise: bool = False
    seed: int = 0

    def __post_init__(self):
        errs = self.violations()
        if errs:
            raise ProtocolConfigError("; ".join(errs))

    def violations(self) -> list[str]:
        errs = []
        if not self.symbol_time > 0:
            errs.append("symbol_time must be positive")
            return errs
        k = self.interval / self.symbol_time
        if abs(k - round(k)) > 1e-6 * max(k, 1) or round(k) < 1:
            errs.append(f"interval/symbol_time = {k:.6g} is not a positive integer")
        elif not 2 <= self.feedback_count <= round(k) and self.feedback_count != 1:
            errs.append(f"feedback count {self.feedback_count} outside [1, K={round(k)}]")
        if not 0 < self.feedback_ratio <= 1:
            errs.append("feedback_ratio must lie in (0, 1]")
        if self.history < self.interval:
            errs.append("history window must be at least one interval")
        if self.duration <= self.history:
            errs.append("duration must exceed the history window")
        return errs

    @property
    def K(self) -> int:
        return int(round(self.interval / self.symbol_time))

    @property
    def feedback_count(self) -> int:
        k = int(round(self.interval / self.symbol_time))
        return max(1, int(round(self.feedback_ratio * k)))

    @property
    def num_symbols(self) -> int:
        return int(round(self.duration / self.symbol_time))

    @property
    def warmup_symbols(self) -> int:
        return int(round(self.history / self.symbol_time))


def feedback_positions(K: int, K_F: int) -> list[int]:
    """1-based feedback symbol positions within one interval."""
    if K < 1 or not 1 <= K_F <= K:
        raise ProtocolConfigError(f"need 1 <= K_F <= K, got K={K}, K_F={K_F}")
    if K_F == 1:
        return [1]
    return sorted({1 + ((i - 1) * (K - 1)) // (K_F - 1) for i in range(1, K_F + 1)})


def snr_to_noise_var(snr_db: float, geom: ArrayGeometry, initial: PolarState) -> float:
    h0 = los_channel(geom, initial)
    return float(np.vdot(h0, h0).real) / 10.0 ** (snr_db / 10.0)


def _feedback_mask(count: int, K: int, K_F: int) -> np.ndarray:
    mask = np.zeros(K, dtype=bool)
    mask[np.array(feedback_positions(K, K_F)) - 1] = True
    reps = -(-count // K)
    return np.tile(mask, reps)[:count]


# --------------------------------------------------------------------------
# channel access


@dataclass
class Link:
    """True channel plus the noise stream; the only path to y and G."""

    geom: ArrayGeometry
    truth: TrajectoryTruth
    scatterers: tuple
    noise_var: float
    rng: np.random.Generator
    symbol_time: float

    def times(self, u0: int, n: int) -> np.ndarray:
        return (u0 + np.arange(n)) * self.symbol_time

    def channels(self, u0: int, n: int):
        theta, r = self.truth.polar(np.minimum(self.times(u0, n), self.truth.duration))
        return full_channel_matrix(self.geom, theta, r, self.scatterers), theta, r

    def transmit(self, u0: int, W: np.ndarray):
        H, theta, r = self.channels(u0, len(W))
        z = self.rng.standard_normal((len(W), 2))
        noise = math.sqrt(self.noise_var / 2.0) * (z[:, 0] + 1j * z[:, 1])
        y = np.einsum("ij,ij->i", H.conj(), W) + noise
        return y, normalized_gains(H, W), theta, r


# --------------------------------------------------------------------------
# warm-up


def _unwrap_tracking(t: np.ndarray, phase: np.ndarray, span: int = 16) -> np.ndarray:
    """Unwrap by choosing the 2*pi branch nearest a linear extrapolation.

    Plain unwrapping slips a cycle across gaps between retained samples;
    extrapolating the recent slope bridges them.
    """
    out = np.empty_like(phase)
    out[0] = phase[0]
    for i in range(1, len(phase)):
        j0 = max(0, i - span)
        pred = out[i - 1]
        if i - j0 >= 3:
            tt = t[j0:i] - t[i - 1]
            pp = out[j0:i]
            tc = tt - tt.mean()
            slope = float(tc @ (pp - pp.mean()) / (tc @ tc))
            pred = pp.mean() + slope * (t[i] - t[i - 1] - tt.mean())
        out[i] = phase[i] + 2.0 * math.pi * np.round((pred - phase[i]) / (2.0 * math.pi))
    return out


def _unwrap_range(model: MotionPoly, geom: ArrayGeometry, win: Window, frac: float = 0.3) -> MotionPoly:
    """Re-seed the range polynomial from the unwrapped phase of y against the model.

    Only strong samples are used; squaring removes the sign ambiguity of
    weak samples near beam nulls.
    """
    mu = model_response(model, geom, win, with_grad=False).mu
    z = win.y * np.conj(mu)
    mag = np.abs(z)
    sel = np.flatnonzero(mag > frac * np.quantile(mag, 0.9))
    if sel.size < len(model.beta) + 1:
        return model
    t_local = win.t[sel] - model.t_origin
    phase = _unwrap_tracking(t_local, np.angle(z[sel] ** 2)) / 2.0
    k = 2.0 * math.pi / geom.wavelength
    _, r_fit = poly_eval_raw(model, t_local)
    Phi = basis_matrix(t_local / model.time_scale, model.p_beta)
    beta = np.linalg.lstsq(Phi, r_fit + (phase - phase[0]) / k, rcond=None)[0]
    return MotionPoly(model.alpha, beta, model.time_scale, model.t_origin)


def _magnitude_fit(model: MotionPoly, geom: ArrayGeometry, win: Window, iters: int, eta: float) -> MotionPoly:
    """Fit the angle polynomial to |y| alone, which ignores the range phase."""
    na = model.p_alpha + 1
    M = _internal_basis(model, "legendre")[:na, :na]
    z = np.linalg.solve(M, model.alpha)
    state = AdamState.zeros(na)
    cfg = AdamConfig()
    ay = np.abs(win.y)
    prep = _Prepared.of(model, geom, win)
    best_J, best = math.inf, model
    for _ in range(iters):
        res = _respond(model, geom, prep, True)
        am = np.abs(res.mu)
        e = ay - am
        J = float(e @ e)
        if J < best_J:
            best_J, best = J, model
        dam = np.real(np.conj(res.mu) * res.d_theta) / np.maximum(am, 1e-300)
        g = res.phi_alpha.T @ (-2.0 * e * dam)
        z = z + adam_step(state, M.T @ g, np.full(na, eta), cfg)
        model = MotionPoly(M @ z, model.beta, model.time_scale, model.t_origin)
    return best


@dataclass
class WarmupResult:
    window: Window
    model: MotionPoly
    diagnostics: FitDiagnostics
    rounds: int
    floor: float


def fit_from_rest(initial: MotionPoly, geom: ArrayGeometry, win: Window, noise_var: float,
                  spec: WarmupSpec, adam: AdamConfig):
    """Fit from a zero-velocity start.

    The angle comes first from |y|; the range is then seeded from unwrapped
    phase and refined by Adam, the first round with the angle held fixed.
    Rounds repeat until J is near the noise floor.
    """
    def cfg(eta_alpha):
        return replace(adam, eta_alpha=eta_alpha, max_iter=spec.max_iter)

    # relative floor keeps the acceptance test meaningful for noiseless data
    floor = max(len(win) * noise_var, 1e-13 * float(np.sum(np.abs(win.y) ** 2)))
    model = _magnitude_fit(initial, geom, win, spec.magnitude_iter, adam.eta_alpha)
    best, best_diag, rounds = model, None, 0
    for rounds in range(1, spec.max_rounds + 1):
        model = _unwrap_range(model, geom, win)
        model, diag = adam_fit(model, geom, win, cfg(0.0 if rounds == 1 else adam.eta_alpha))
        if best_diag is None or diag.best_J < best_diag.best_J:
            best, best_diag = model, diag
        if diag.best_J < spec.accept_ratio * floor:
            break
    model, diag = adam_fit(best, geom, win, cfg(adam.eta_alpha))
    if diag.best_J <= best_diag.best_J:
        best, best_diag = model, diag
    return best, best_diag, rounds, floor


def warmup(truth: TrajectoryTruth, geom: ArrayGeometry, config: ProtocolConfig, rng: np.random.Generator,
           link: Link, initial: PolarState | None = None) -> WarmupResult:
    """Dithered genie beams over the first history span, then one MLE.

    Returns the scheduled feedback window and the fitted model. The
    symbols are transmitted through ``link`` so they land in the trace.
    """
    spec = config.warmup
    U = config.warmup_symbols
    t = link.times(0, U)
    theta, r = truth.polar(t)
    dth = rng.normal(0.0, math.radians(spec.angle_dither_deg), U)
    dr = rng.normal(0.0, spec.range_dither_frac, U)
    W = mrt_rows(los_channel_matrix(geom, theta + dth, r * (1.0 + dr)))
    if initial is None:
        th0, r0 = truth.polar(0.0)
        initial = PolarState(float(th0) + rng.normal(0.0, math.radians(spec.init_angle_std_deg)),
                             float(r0) * (1.0 + rng.normal(0.0, spec.init_range_std_frac)))
    y, gains, th_true, r_true = link.transmit(0, W)
    fb = _feedback_mask(U, config.K, config.feedback_count)
    idx = np.flatnonzero(fb)
    win = Window(idx.astype(np.int64), t[idx], W[idx], y[idx])
    start = MotionPoly.constant(initial, config.p_alpha, config.p_beta, config.history, 0.0)
    model, diag, rounds, floor = fit_from_rest(start, geom, win, link.noise_var, spec, config.adam)
    if diag.best_J > spec.fail_ratio * floor:
        raise WarmupError(
            f"warm-up fit did not lock: J/floor = {diag.best_J / floor:.3g} after {rounds} rounds", diag)
    records = dict(W=W, y=y, gains=gains, theta=th_true, r=r_true, fed=fb)
    res = WarmupResult(win, model, diag, rounds, floor)
    res.records = records
    return res


# --------------------------------------------------------------------------
# trace


TRACE_COLUMNS = ("u", "t", "theta_true", "r_true", "theta_hat", "r_hat", "provenance", "gain", "fed_back")
INTERVAL_COLUMNS = ("m", "t_end", "J", "iterations", "converged", "trace_cov_alpha", "trace_cov_beta", "window_size")


@dataclass
class IntervalRecord:
    m: int
    t_end: float
    J: float
    iterations: int
    converged: bool
    trace_cov_alpha: float
    trace_cov_beta: float
    window_size: int


@dataclass
class RunTrace:
    scenario: str
    policy: str
    seed: int
    symbol_time: float
    interval_symbols: int
    tracking_start: int
    u: np.ndarray
    theta_true: np.ndarray
    r_true: np.ndarray
    theta_hat: np.ndarray
    r_hat: np.ndarray
    provenance: np.ndarray
    gain: np.ndarray
    fed_back: np.ndarray
    intervals: list[IntervalRecord] = field(default_factory=list)
    warmup_rounds: int = 0
    feedback_ratio: float = 1.0

    @property
    def t(self) -> np.ndarray:
        return self.u * self.symbol_time

    def __len__(self) -> int:
        return len(self.u)

    @property
    def name(self) -> str:
        return f"{self.scenario}_{self.policy}_{self.seed}"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(TRACE_COLUMNS)
            for i in range(len(self.u)):
                wr.writerow([
                    int(self.u[i]), repr(float(self.u[i] * self.symbol_time)),
                    repr(float(self.theta_true[i])), repr(float(self.r_true[i])),
                    repr(float(self.theta_hat[i])), repr(float(self.r_hat[i])),
                    self.provenance[i], repr(float(self.gain[i])), int(self.fed_back[i]),
                ])

    def intervals_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(INTERVAL_COLUMNS)
            for rec in self.intervals:
                wr.writerow([rec.m, repr(rec.t_end), repr(rec.J), rec.iterations, int(rec.converged),
                             repr(rec.trace_cov_alpha), repr(rec.trace_cov_beta), rec.window_size])


def read_trace_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {h: [r[i] for r in body] for i, h in enumerate(header)}
    out = {}
    for h, vals in cols.items():
        if h == "provenance":
            out[h] = np.array(vals)
        elif h in ("u", "fed_back"):
            out[h] = np.array([int(v) for v in vals])
        else:
            out[h] = np.array([float(v) for v in vals])
    return out


class _TraceBuilder:
    def __init__(self, n: int):
        self.theta_true = np.zeros(n)
        self.r_true = np.zeros(n)
        self.theta_hat = np.full(n, np.nan)
        self.r_hat = np.full(n, np.nan)
        self.provenance = np.empty(n, dtype=object)
        self.gain = np.zeros(n)
        self.fed = np.zeros(n, dtype=bool)

    def put(self, u0, theta, r, theta_hat, r_hat, prov, gains, fed):
        s = slice(u0, u0 + len(gains))
        self.theta_true[s], self.r_true[s] = theta, r
        self.theta_hat[s], self.r_hat[s] = theta_hat, r_hat
        self.provenance[s] = prov
        self.gain[s] = gains
        self.fed[s] = fed


# --------------------------------------------------------------------------
# policies in the loop


@dataclass
class Segment:
    W: np.ndarray
    theta_hat: np.ndarray
    r_hat: np.ndarray
    provenance: np.ndarray | str
    fed: np.ndarray


class _MlePolicy:
    """Thompson-sampling probes (or pure exploitation) with per-interval MLE."""

    def __init__(self, explore: bool, geom, config: ProtocolConfig, rng, noise_var, warm: WarmupResult):
        self.explore = explore
        self.geom = geom
        self.cfg = config
        self.rng = rng
        self.noise_var = noise_var
        self.K = config.K
        self.fb_mask = _feedback_mask(self.K, self.K, config.feedback_count)
        self.start = config.warmup_symbols
        # feedback kept as per-interval blocks, dropped once older than the window
        self.blocks = [warm.window]
        self.belief = self._posterior(warm.model, warm.window, warm.diagnostics)
        self.factors = SamplingFactors.of(self.belief)
        self.intervals: list[IntervalRecord] = []
        self.m = 0

    def _posterior(self, model, win, diag) -> PosteriorBelief:
        nv = plugin_noise_var(diag.best_J, len(win)) if self.cfg.plugin_noise else self.noise_var
        return posterior(model, observed_fim(model, self.geom, win, nv), nv, diagnostics=diag)

    def next_segment(self, u0: int, limit: int) -> Segment:
        k0 = (u0 - self.start) % self.K
        n = min(self.K - k0, limit)
        t_local = (u0 + np.arange(n)) * self.cfg.symbol_time - self.belief.mean.t_origin
        fed = self.fb_mask[k0:k0 + n]
        W, th, r = exploit_beams(self.belief, self.geom, t_local)
        W, th, r = W.copy(), th.copy(), r.copy()
        prov = np.where(fed, "ts-probe" if self.explore else "exploit", "exploit").astype(object)
        if self.explore and fed.any():
            Wp, thp, rp = ts_beams(self.belief, self.geom, t_local[fed], self.rng, self.factors)
            W[fed], th[fed], r[fed] = Wp, thp, rp
        return Segment(W, th, r, prov, fed)

    def feedback(self, u0: int, seg: Segment, y: np.ndarray) -> None:
        idx = np.flatnonzero(seg.fed)
        if idx.size:
            u = u0 + idx
            self.blocks.append(Window(u.astype(np.int64), u * self.cfg.symbol_time, seg.W[idx], y[idx]))
        end = u0 + len(y)
        if (end - self.start) % self.K == 0:
            self._update(end)

    def _update(self, end: int) -> None:
        self.m += 1
        t_end = end * self.cfg.symbol_time
        t_lo = t_end - self.cfg.history
        self.blocks = [b[b.t >= t_lo - 1e-12] for b in self.blocks]
        self.blocks = [b for b in self.blocks if len(b)]
        win = Window(*(np.concatenate([getattr(b, f) for b in self.blocks]) for f in ("u", "t", "W", "y")))
        init = poly_shift(self.belief.mean, t_lo - self.belief.mean.t_origin)
        model, diag = adam_fit(init, self.geom, win, self.cfg.adam)
        floor = max(len(win) * self.noise_var, 1e-13 * float(np.sum(np.abs(win.y) ** 2)))
        if diag.best_J > self.cfg.warmup.accept_ratio * floor:
            model, diag = self._reanchor(model, diag, win)
        self.belief = self._posterior(model, win, diag)
        self.factors = SamplingFactors.of(self.belief)
        self.intervals.append(IntervalRecord(
            self.m, t_end, diag.best_J, diag.iterations, diag.converged,
            float(np.trace(self.belief.cov_alpha)), float(np.trace(self.belief.cov_beta)), len(win)))


    def _reanchor(self, model, diag, win):
        """Retry a fit stuck on a wrong range branch: re-seed range from phase, then refit.

        Kept only if it lowers J, so the estimate stays the best MLE found.
        """
        a = self.cfg.adam
        frozen = replace(a, eta_alpha=0.0)
        cand, _ = adam_fit(_unwrap_range(model, self.geom, win), self.geom, win, frozen)
        cand, cdiag = adam_fit(cand, self.geom, win, a)
        if cdiag.best_J < diag.best_J:
            cdiag.iterations += diag.iterations
            return cand, cdiag
        return model, diag


class _GeniePolicy:
    """MRT toward the true full channel: the upper bound."""

    def __init__(self, link: Link, K: int):
        self.link = link
        self.K = K
        self.intervals: list[IntervalRecord] = []

    def next_segment(self, u0: int, limit: int) -> Segment:
        n = min(self.K, limit)
        H, th, r = self.link.channels(u0, n)
        return Segment(mrt_rows(H), th, r, "genie", np.zeros(n, dtype=bool))

    def feedback(self, u0, seg, y) -> None:
        pass


class _EkfPolicy:
    """Exhaustive codebook sweep every period, constant-velocity EKF in between."""

    def __init__(self, geom, config: ProtocolConfig, spec: PolicySpec, region: Region, initial: PolarState,
                 test_mode: bool = False):
        self.geom = geom
        self.cfg = config
        self.codebook = build_codebook(geom, region, spec.codebook_angles or geom.num_elements,
                                       spec.codebook_rings)
        self.period = int(round(spec.ekf_period / config.symbol_time))
        x = np.array([initial.theta, 0.0, initial.r, 0.0])
        P = np.diag([math.radians(1.0) ** 2, 0.2**2, (0.05 * initial.r) ** 2, 5.0**2])
        self.state = EkfState(x, P, np.array(spec.ekf_q, dtype=float))
        self.t_state = config.history
        self.payload_left = 0
        self.test_mode = test_mode
        self.intervals: list[IntervalRecord] = []

    def next_segment(self, u0: int, limit: int) -> Segment:
        if self.payload_left == 0:
            n = min(len(self.codebook), limit)
            th, r = self.codebook.grid_thetas()[:n], self.codebook.grid_rings()[:n]
            return Segment(self.codebook.W[:n], th, r, "sweep", np.ones(n, dtype=bool))
        n = min(self.payload_left, limit)
        dt = (u0 + np.arange(n)) * self.cfg.symbol_time - self.t_state
        x = self.state.x
        th, r = x[0] + x[1] * dt, x[2] + x[3] * dt
        from .trajectory import ClampBounds, clamp_states
        th, r, _ = clamp_states(th, r, ClampBounds.for_geometry(self.geom))
        return Segment(mrt_rows(los_channel_matrix(self.geom, th, r)), th, r, "ekf", np.zeros(n, dtype=bool))

    def feedback(self, u0: int, seg: Segment, y: np.ndarray) -> None:
        if seg.provenance == "sweep":
            if len(y) < len(self.codebook):
                return  # truncated by the end of the run
            # the measurement refers to the end of the sweep
            t_meas = (u0 + len(y)) * self.cfg.symbol_time
            if t_meas > self.t_state:
                self.state = ekf_predict(self.state, t_meas - self.t_state)
            self.state, _ = ekf_sweep_update(self.state, self.codebook, lambda W: (y, np.zeros(len(y))),
                                             check=self.test_mode)
            self.t_state = t_meas
            self.payload_left = self.period
        else:
            self.payload_left -= len(y)


class _CoherencePolicy:
    """Hold a codeword until its predicted coherence time expires, then sweep locally."""

    def __init__(self, geom, config: ProtocolConfig, spec: PolicySpec, region: Region, max_speed: float):
        self.geom = geom
        self.max_speed = max_speed
        self.cfg = config
        self.codebook = build_codebook(geom, region, spec.codebook_angles or geom.num_elements,
                                       spec.codebook_rings)
        self.timer = CoherenceTimer(spec.coherence_loss, half_widths=tuple(spec.coherence_half_widths))
        self.cap = spec.coherence_cap
        self.held: int | None = None
        self.hold_left = 0
        self.meas: list[tuple[float, float, float]] = []  # (t, theta, r)
        self.pending: list[int] | None = None
        self.intervals: list[IntervalRecord] = []

    def _rates(self) -> tuple[float, float]:
        if len(self.meas) < 2:
            return 0.0, 0.0
        (t0, a0, r0), (t1, a1, r1) = self.meas[-2], self.meas[-1]
        # grid quantization makes raw differences implausible; cap at the known max speed
        vmax = self.max_speed
        rd = float(np.clip((r1 - r0) / (t1 - t0), -vmax, vmax))
        wd = float(np.clip((a1 - a0) / (t1 - t0), -vmax / r1, vmax / r1))
        return wd, rd

    def _predicted(self, t: float) -> PolarState:
        t1, a1, r1 = self.meas[-1]
        wd, rd = self._rates()
        from .trajectory import ClampBounds, clamp_states
        th, r, _ = clamp_states(a1 + wd * (t - t1), r1 + rd * (t - t1), ClampBounds.for_geometry(self.geom))
        return PolarState(float(th), float(r))

    def next_segment(self, u0: int, limit: int) -> Segment:
        if self.held is None or self.hold_left == 0:
            if self.held is None:
                idx = list(range(len(self.codebook)))
            else:
                idx = local_sweep(self.codebook, self._predicted(u0 * self.cfg.symbol_time), self.timer.half_widths)
            idx = idx[:limit]
            self.pending = idx
            cb = self.codebook
            return Segment(cb.W[idx], cb.grid_thetas()[idx], cb.grid_rings()[idx], "sweep",
                           np.ones(len(idx), dtype=bool))
        n = min(self.hold_left, limit)
        cb = self.codebook
        return Segment(np.repeat(cb.W[self.held][None, :], n, axis=0), np.full(n, cb.grid_thetas()[self.held]),
                       np.full(n, cb.grid_rings()[self.held]), "codeword", np.zeros(n, dtype=bool))

    def feedback(self, u0: int, seg: Segment, y: np.ndarray) -> None:
        Ts = self.cfg.symbol_time
        if seg.provenance == "sweep":
            best = self.pending[int(np.argmax(np.abs(y) ** 2))]
            t_meas = (u0 + len(y)) * Ts
            self.held = best
            self.meas.append((t_meas, float(self.codebook.grid_thetas()[best]),
                              float(self.codebook.grid_rings()[best])))
            wd, rd = self._rates()
            start = self._predicted(t_meas)
            self.timer.speed = math.hypot(rd, start.r * wd)
            hold = coherence_expiry(self.codebook.W[best], self.geom, start, (wd, rd),
                                    self.timer.tolerable_loss, Ts, self.cap)
            self.timer.expiry = t_meas + hold
            self.hold_left = max(1, int(round(hold / Ts)))
        else:
            self.hold_left -= len(y)


# --------------------------------------------------------------------------
# run loop


def _streams(seed: int):
    noise, policy, warm = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(noise), np.random.default_rng(policy), np.random.default_rng(warm)


def run_tracking(truth: TrajectoryTruth, geom: ArrayGeometry, scatterers, policy: PolicySpec,
                 config: ProtocolConfig, scenario: str = "run", region: Region | None = None,
                 test_mode: bool = False) -> RunTrace:
    """Simulate one closed-loop run; deterministic in (inputs, config.seed)."""
    if truth.duration + 1e-12 < config.duration:
        raise ProtocolConfigError("truth is shorter than the run")
    region = region or truth.region
    noise_rng, policy_rng, warm_rng = _streams(config.seed)
    th0, r0 = truth.polar(0.0)
    noise_var = snr_to_noise_var(config.snr_db, geom, PolarState(float(th0), float(r0)))
    link = Link(geom, truth, tuple(scatterers), noise_var, noise_rng, config.symbol_time)
    U = config.num_symbols
    tb = _TraceBuilder(U)
    u = 0
    warm_rounds = 0
    if policy.name == "genie":
        agent = _GeniePolicy(link, config.K)
    else:
        warm = warmup(truth, geom, config, warm_rng, link)
        warm_rounds = warm.rounds
        rec = warm.records
        U_w = config.warmup_symbols
        th_hat, r_hat = poly_eval_raw(warm.model, link.times(0, U_w))
        tb.put(0, rec["theta"], rec["r"], th_hat, r_hat, "warmup", rec["gains"], rec["fed"])
        u = U_w
        if policy.name in ("ts", "exploit"):
            agent = _MlePolicy(policy.name == "ts", geom, config, policy_rng, noise_var, warm)
        else:
            t_w = U_w * config.symbol_time
            th_w, r_w = poly_eval_raw(warm.model, t_w)
            start = PolarState(float(th_w), float(r_w))
            if policy.name == "ekf":
                agent = _EkfPolicy(geom, config, policy, region, start, test_mode)
            else:
                agent = _CoherencePolicy(geom, config, policy, region, truth.max_speed)
    while u < U:
        seg = agent.next_segment(u, U - u)
        y, gains, th, r = link.transmit(u, seg.W)
        tb.put(u, th, r, seg.theta_hat, seg.r_hat, seg.provenance, gains, seg.fed)
        agent.feedback(u, seg, y)
        u += len(y)
    return RunTrace(
        scenario, policy.name, config.seed, config.symbol_time, config.K, config.warmup_symbols if policy.name != "genie" else 0,
        np.arange(U), tb.theta_true, tb.r_true, tb.theta_hat, tb.r_hat, tb.provenance, tb.gain, tb.fed,
        agent.intervals, warm_rounds, config.feedback_ratio,
    )


# --------------------------------------------------------------------------
# summaries


SUMMARY_COLUMNS = (
    "scenario", "policy", "seed", "interval_s", "feedback_ratio", "mean_gain", "mean_gain_all", "min_gain", "final_half_gain",
    "track_loss", "first_loss_t", "mean_J", "max_J", "mean_iterations", "symbols",
)


def track_loss_intervals(gain: np.ndarray, start: int, K: int) -> list[int]:
    """Indices of K-symbol blocks (from ``start``) whose gains all fall below the threshold."""
    out = []
    for i, b in enumerate(range(start, len(gain) - K + 1, K)):
        if np.all(gain[b:b + K] < TRACK_LOSS_GAIN):
            out.append(i)
    return out


def summarize(trace: RunTrace) -> dict:
    """One summary row; ``mean_gain`` averages every symbol after warm-up."""
    g = trace.gain[trace.tracking_start:]
    if g.size == 0:
        raise ValueError("empty trace")
    half = trace.tracking_start + (len(trace.gain) - trace.tracking_start) // 2
    lost = track_loss_intervals(trace.gain, trace.tracking_start, trace.interval_symbols)
    Js = np.array([r.J for r in trace.intervals]) if trace.intervals else np.array([math.nan])
    its = np.array([r.iterations for r in trace.intervals]) if trace.intervals else np.array([math.nan])
    first = (trace.tracking_start + lost[0] * trace.interval_symbols) * trace.symbol_time if lost else math.nan
    return {
        "scenario": trace.scenario, "policy": trace.policy, "seed": trace.seed,
        "interval_s": round(trace.interval_symbols * trace.symbol_time, 12), "feedback_ratio": trace.feedback_ratio,
        "mean_gain": float(np.mean(g)), "mean_gain_all": float(np.mean(trace.gain)),
        "min_gain": float(np.min(g)), "final_half_gain": float(np.mean(trace.gain[half:])),
        "track_loss": bool(lost), "first_loss_t": first,
        "mean_J": float(np.mean(Js)), "max_J": float(np.max(Js)), "mean_iterations": float(np.mean(its)),
        "symbols": len(trace.gain),
    }


def write_summary(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SUMMARY_COLUMNS)
        for row in rows:
            wr.writerow([repr(v) if isinstance(v, float) else (int(v) if isinstance(v, bool) else v)
                         for v in (row[c] for c in SUMMARY_COLUMNS)])


# --------------------------------------------------------------------------
# sweep executor


@dataclass(frozen=True)
class RunJob:
    """Everything one worker needs; picklable."""

    id: str
    scenario: str
    geom: ArrayGeometry
    truth_config: object
    truth_seed: int
    scatterers: tuple
    policy: PolicySpec
    config: ProtocolConfig
    out_dir: str | None = None


def execute_job(job: RunJob):
    from .trajectory import generate_truth

    truth = generate_truth(job.truth_config, job.truth_seed)
    try:
        trace = run_tracking(truth, job.geom, job.scatterers, job.policy, job.config, job.scenario,
                             region=job.truth_config.region)
    except WarmupError as exc:
        return job.id, None, str(exc)
    if job.out_dir:
        out = Path(job.out_dir)
        trace.to_csv(out / f"{trace.name}.csv")
        plot_trace(trace, out / f"{trace.name}.svg")
    return job.id, summarize(trace), None


def plot_trace(trace: RunTrace, path) -> None:
    """Gain-vs-time chart of one run, in 1 ms bins."""
    from .plotting import binned, line_chart

    t, g = binned(trace.t, trace.gain, 1e-3)
    line_chart(path, [(trace.policy, t, g)], f"{trace.name}: normalized gain", "time (s)",
               "normalized gain", ylim=(0.0, 1.05))


def run_jobs(jobs, workers: int = 1):
    """Run jobs, possibly in parallel; results come back in job order."""
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        results = [execute_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(execute_job, jobs))
    return results
