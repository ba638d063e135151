from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nftrack.channel import ArrayGeometry, PolarState, field_boundaries, los_channel, normalized_gain
from nftrack.estimator import PosteriorBelief
from nftrack.policies import (
    Beamformer,
    CoherenceTimer,
    EkfState,
    PolicyConfigError,
    SamplingFactors,
    build_codebook,
    coherence_expiry,
    ekf_measurement_noise,
    ekf_predict,
    ekf_sweep_update,
    ekf_update,
    exploit_beam,
    exploit_beams,
    local_sweep,
    ts_beam,
    ts_beams,
    ts_sample,
    ts_samples,
)
from nftrack.trajectory import MotionPoly, Region, poly_eval

GEOM = ArrayGeometry.half_wavelength(64, 73e9)
DESK = Region(-math.pi / 3, math.pi / 3, 1.5, 8.0)
T_H = 0.0666


def belief_at(theta=0.3, r=4.0, scale=1.0, seed=0):
    rng = np.random.default_rng(seed)
    mean = MotionPoly.from_physical([theta, 0.2, 0.0, 0.0], [r, -1.0, 0, 0, 0, 0, 0], T_H)
    A = rng.normal(size=(4, 4))
    B = rng.normal(size=(7, 7))
    ca = scale * (A @ A.T + 4 * np.eye(4)) * 1e-7
    cb = scale * (B @ B.T + 7 * np.eye(7)) * 1e-7
    return PosteriorBelief(mean, ca, cb, 1e-10)


def test_exploit_beam_is_mrt_to_mean():
    bel = PosteriorBelief.point_mass(MotionPoly([0.3], [4.0], T_H))
    h = los_channel(GEOM, PolarState(0.3, 4.0))
    b = exploit_beam(bel, GEOM, 0.01)
    assert b.provenance == "exploit"
    assert abs(np.linalg.norm(b.w) - 1) < 1e-12
    assert normalized_gain(h, b.w) == pytest.approx(1.0, abs=1e-12)
    # global phase of the estimate is irrelevant to the gain
    assert normalized_gain(h * np.exp(1.3j), b.w) == pytest.approx(1.0, abs=1e-12)


def test_beamformer_validation():
    with pytest.raises(ValueError):
        Beamformer(np.ones(4), "exploit")
    with pytest.raises(ValueError):
        Beamformer(np.ones(4) / 2, "guess")


def test_ts_sample_zero_covariance_is_mean():
    bel = PosteriorBelief.point_mass(MotionPoly([0.1, 0.2], [5.0, 0.3], T_H))
    s = ts_sample(bel, np.random.default_rng(0))
    np.testing.assert_array_equal(s.alpha, bel.mean.alpha)
    np.testing.assert_array_equal(s.beta, bel.mean.beta)
    ts = ts_beam(bel, GEOM, 0.02, np.random.default_rng(1))
    ex = exploit_beam(bel, GEOM, 0.02)
    np.testing.assert_array_equal(ts.w, ex.w)


def test_ts_sample_monte_carlo_moments():
    bel = belief_at()
    n = 100_000
    alpha, beta = ts_samples(bel, np.random.default_rng(42), n)
    for draws, mean, cov in ((alpha, bel.mean.alpha, bel.cov_alpha), (beta, bel.mean.beta, bel.cov_beta)):
        sd = np.sqrt(np.diag(cov))
        assert np.all(np.abs(draws.mean(axis=0) - mean) <= 4 * sd / math.sqrt(n))
        emp = np.cov(draws, rowvar=False)
        assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) < 0.05


def test_ts_draws_are_deterministic():
    bel = belief_at()
    a = ts_beams(bel, GEOM, np.linspace(0, 0.01, 5), np.random.default_rng(3))
    b = ts_beams(bel, GEOM, np.linspace(0, 0.01, 5), np.random.default_rng(3))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_exploration_costs_gain():
    bel = belief_at(scale=1.0)
    inflated = PosteriorBelief(bel.mean, 100 * bel.cov_alpha, bel.cov_beta, bel.noise_var)
    t = np.full(2000, 0.01)
    s = poly_eval(bel.mean, 0.01)
    h = los_channel(GEOM, s)
    W, _, _ = ts_beams(inflated, GEOM, t, np.random.default_rng(5))
    g_ts = np.mean(np.abs(W.conj() @ h) ** 2) / np.vdot(h, h).real
    g_ex = normalized_gain(h, exploit_beam(bel, GEOM, 0.01).w)
    assert g_ts < g_ex


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.05))
def test_policy_beams_unit_norm(seed, t):
    bel = belief_at(seed=seed % 1000, scale=1000.0)
    W, _, _ = ts_beams(bel, GEOM, [t, t], np.random.default_rng(seed))
    We, _, _ = exploit_beams(bel, GEOM, [t])
    np.testing.assert_allclose(np.linalg.norm(np.vstack([W, We]), axis=1), 1.0, atol=1e-9)


def test_sampling_factors_reject_indefinite():
    bel = belief_at()
    bad = PosteriorBelief(bel.mean, -bel.cov_alpha, bel.cov_beta, 1.0)
    with pytest.raises(PolicyConfigError):
        SamplingFactors.of(bad)


def test_codebook_single_entry_and_norms():
    cb = build_codebook(GEOM, DESK, 1, 1)
    assert len(cb) == 1
    fre, ray = field_boundaries(GEOM)
    lo, hi = max(fre, DESK.r_min), min(ray, DESK.r_max)
    assert cb.thetas[0] == pytest.approx(0.0, abs=1e-15)
    assert cb.rings[0] == pytest.approx(math.sqrt(lo * hi), rel=1e-12)
    full = build_codebook(GEOM, DESK, 64, 8)
    np.testing.assert_allclose(np.linalg.norm(full.W, axis=1), 1.0, atol=1e-12)
    with pytest.raises(PolicyConfigError):
        build_codebook(GEOM, Region(-1, 1, 20.0, 80.0), 4, 4)


def test_codebook_grid_adequacy():
    cb = build_codebook(GEOM, DESK, 64, 8)
    rng = np.random.default_rng(0)
    for _ in range(300):
        s = PolarState(math.asin(rng.uniform(math.sin(DESK.theta_min), math.sin(DESK.theta_max))),
                       rng.uniform(DESK.r_min, DESK.r_max))
        h = los_channel(GEOM, s)
        best = np.max(np.abs(cb.W.conj() @ h) ** 2) / np.vdot(h, h).real
        assert best >= 0.5


def test_codebook_csv(tmp_path):
    cb = build_codebook(GEOM, DESK, 4, 2)
    cb.to_csv(tmp_path / "cb.csv")
    rows = (tmp_path / "cb.csv").read_text().splitlines()
    assert rows[0] == "index,theta_q,r_q" and len(rows) == 9


@settings(max_examples=200, deadline=None)
@given(st.floats(-1.2, 1.2), st.floats(1.0, 9.0), st.integers(0, 3), st.integers(0, 3))
def test_local_sweep_properties(theta, r, ha, hs):
    cb = build_codebook(GEOM, DESK, 16, 6)
    center = PolarState(theta, r)
    idx = local_sweep(cb, center, (ha, hs))
    assert 1 <= len(idx) <= (2 * ha + 1) * (2 * hs + 1)
    assert len(set(idx)) == len(idx)
    # brute force: lexicographic (|d sin|, |d r|) over the whole grid
    keys = [(abs(math.sin(th) - math.sin(theta)), abs(rr - r), i)
            for i, (th, rr) in enumerate(zip(cb.grid_thetas(), cb.grid_rings()))]
    brute = min(keys)[2]
    a0, s0 = cb.nearest(center)
    assert cb.index(a0, s0) == brute
    assert local_sweep(cb, center, (0, 0)) == [brute]
    assert brute in idx


def _ekf(x=(0.2, 0.0, 4.0, 0.0), p=1e-3, q=(1e-6, 1.0, 1e-4, 1.0)):
    return EkfState(np.array(x, float), p * np.eye(4), np.array(q, float))


def test_ekf_predict_examples():
    st0 = _ekf()
    st1 = ekf_predict(st0, 0.04)
    np.testing.assert_array_equal(st1.x, st0.x)
    F = np.array([[1, 0.04, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0.04], [0, 0, 0, 1]])
    np.testing.assert_allclose(st1.P - F @ st0.P @ F.T, np.diag(st0.Q) * 0.04, atol=1e-15)
    mv = _ekf(x=(0.2, 0.5, 4.0, -1.0))
    half = ekf_predict(ekf_predict(mv, 0.02), 0.02)
    np.testing.assert_allclose(half.x, ekf_predict(mv, 0.04).x, rtol=1e-14)
    for s in (st1, half):
        np.testing.assert_array_equal(s.P, s.P.T)
        assert np.linalg.eigvalsh(s.P).min() > 0
    with pytest.raises(ValueError):
        ekf_predict(st0, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ekf_update_shrinks_measured_covariance(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4))
    P = A @ A.T * 1e-3 + 1e-6 * np.eye(4)
    st0 = EkfState(rng.normal(size=4), P, np.ones(4))
    R = np.diag(rng.uniform(1e-6, 1e-2, 2))
    st1 = ekf_update(st0, rng.normal(size=2), R)
    Hm = np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]])
    diff = Hm @ (st0.P - st1.P) @ Hm.T
    assert np.linalg.eigvalsh(diff).min() >= -1e-12 * np.abs(st0.P).max()
    assert np.linalg.eigvalsh(st0.P - st1.P).min() >= -1e-12 * np.abs(st0.P).max()


def test_ekf_sweep_on_grid_point():
    cb = build_codebook(GEOM, DESK, 32, 4)
    a, s = 11, 2
    user = PolarState(float(cb.thetas[a]), float(cb.rings[s]))
    h = los_channel(GEOM, user)
    calls = []

    def transmit(W):
        calls.append(len(W))
        y = W.conj() @ h
        return y, np.abs(y) ** 2 / np.vdot(h, h).real

    st0 = _ekf(x=(user.theta + 0.01, 0.0, user.r + 0.1, 0.0))
    st1, res = ekf_sweep_update(st0, cb, transmit, check=True)
    assert calls == [32 * 4] and len(res.y) == len(cb)
    assert res.index == cb.index(a, s)
    R = ekf_measurement_noise(cb, a, s)
    assert R[0, 0] > 0 and R[1, 1] > 0
    assert abs(st1.x[0] - user.theta) < abs(st0.x[0] - user.theta)


def test_coherence_expiry_examples():
    s = PolarState(0.2, 4.0)
    w = los_channel(GEOM, s)
    w = w / np.linalg.norm(w)
    Ts = 1 / 30e3
    assert coherence_expiry(w, GEOM, s, (0.0, 0.0), 0.5, Ts, 0.025) == 0.025
    assert coherence_expiry(w, GEOM, s, (0.01, 0.0), 0.9999, Ts, 0.025) == 0.025
    e1 = coherence_expiry(w, GEOM, s, (0.5, 0.0), 0.5, Ts, 0.2)
    e2 = coherence_expiry(w, GEOM, s, (1.0, 0.0), 0.5, Ts, 0.2)
    assert 0 < e2 <= e1 < 0.2
    with pytest.raises(PolicyConfigError):
        coherence_expiry(w, GEOM, s, (1.0, 0.0), 1.0, Ts, 0.2)
    with pytest.raises(PolicyConfigError):
        CoherenceTimer(0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 2.0), st.floats(-3.0, 3.0), st.floats(1.1, 3.0))
def test_coherence_expiry_monotone_in_speed(wd, rd, factor):
    s = PolarState(-0.3, 3.0)
    w = los_channel(GEOM, s)
    w = w / np.linalg.norm(w)
    Ts = 1 / 30e3
    slow = coherence_expiry(w, GEOM, s, (wd, rd), 0.5, Ts, 0.1)
    fast = coherence_expiry(w, GEOM, s, (factor * wd, factor * rd), 0.5, Ts, 0.1)
    assert fast <= slow + Ts
