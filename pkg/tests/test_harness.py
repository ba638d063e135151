from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import CubicSpline

from nftrack import harness
from nftrack.channel import ArrayGeometry, PolarState, Scatterer, los_channel
from nftrack.estimator import adam_fit
from nftrack.harness import (
    SUMMARY_COLUMNS,
    TRACE_COLUMNS,
    Link,
    PolicySpec,
    ProtocolConfig,
    ProtocolConfigError,
    RunTrace,
    WarmupSpec,
    feedback_positions,
    read_trace_csv,
    run_tracking,
    snr_to_noise_var,
    summarize,
    warmup,
    write_summary,
)
from nftrack.trajectory import MotionPoly, Region, TrajectoryTruth, TruthConfig, generate_truth, poly_eval_raw

DESK_GEOM = ArrayGeometry.half_wavelength(64, 73e9)
DESK_REGION = Region(-math.pi / 3, math.pi / 3, 1.5, 8.0)


def desk_truth(seed=0, duration=0.3):
    return generate_truth(TruthConfig(region=DESK_REGION, duration=duration, waypoint_spacing=1.0), seed)


def short_config(**kw):
    base = dict(interval=0.010, feedback_ratio=1.0, duration=0.2, seed=0)
    base.update(kw)
    return ProtocolConfig(**base)


# --------------------------------------------------------------------------
# protocol arithmetic


def test_feedback_positions_examples():
    assert feedback_positions(10, 3) == [1, 5, 10]
    assert feedback_positions(7, 7) == list(range(1, 8))
    assert feedback_positions(2, 2) == [1, 2]
    assert feedback_positions(5, 1) == [1]
    with pytest.raises(ProtocolConfigError):
        feedback_positions(5, 6)


def test_feedback_positions_brute_force():
    for K in range(1, 201):
        for K_F in range(1, K + 1):
            if K_F == 1:
                oracle = {1}
            else:
                oracle = {1 + math.floor(Fraction((i - 1) * (K - 1), K_F - 1)) for i in range(1, K_F + 1)}
            got = feedback_positions(K, K_F)
            assert got == sorted(oracle)
            assert len(got) == K_F


def test_snr_to_noise_var_examples():
    geom = ArrayGeometry.half_wavelength(256, 73e9)
    s = PolarState(0.0, 20.0)
    hh = float(np.vdot(los_channel(geom, s), los_channel(geom, s)).real)
    assert snr_to_noise_var(0.0, geom, s) == pytest.approx(hh, rel=1e-14)
    assert snr_to_noise_var(20.0, geom, s) == pytest.approx(2.67e-12, rel=1e-3)
    assert snr_to_noise_var(30.0, geom, s) == pytest.approx(snr_to_noise_var(20.0, geom, s) / 10, rel=1e-12)


def test_protocol_config_validation():
    assert short_config().violations() == []
    for bad in (dict(interval=0.01001), dict(history=0.005), dict(feedback_ratio=1.5), dict(duration=0.05)):
        with pytest.raises(ProtocolConfigError):
            short_config(**bad)
    with pytest.raises(ProtocolConfigError):
        run_tracking(desk_truth(duration=0.1), DESK_GEOM, (), PolicySpec("ts"), short_config(duration=0.2))


# --------------------------------------------------------------------------
# warm-up


def in_model_truth(duration=0.2):
    poly = MotionPoly.from_physical([0.3, 0.4, -0.5, 0.2], [4.0, -2.0, 1.0, 0.3, 0, 0, 0], 0.0666)
    t = np.linspace(0, duration, 2001)
    th, r = poly_eval_raw(poly, t)
    truth = TrajectoryTruth(CubicSpline(t, r * np.cos(th)), CubicSpline(t, r * np.sin(th)), duration,
                            DESK_REGION, 3.0, 4.0)
    return poly, truth


def test_warmup_noiseless_zero_dither_self_consistent():
    _, truth = in_model_truth()
    spec = WarmupSpec(angle_dither_deg=0.0, range_dither_frac=0.0, init_angle_std_deg=0.0, init_range_std_frac=0.0)
    cfg = short_config(snr_db=math.inf, warmup=spec)
    link = Link(DESK_GEOM, truth, (), 0.0, np.random.default_rng(0), cfg.symbol_time)
    res = warmup(truth, DESK_GEOM, cfg, np.random.default_rng(1), link)
    assert res.diagnostics.best_J < 1e-12 * np.sum(np.abs(res.window.y) ** 2)


def test_warmup_same_seed_same_observations():
    truth = desk_truth()
    cfg = short_config()
    out = []
    for _ in range(2):
        link = Link(DESK_GEOM, truth, (), 1e-10, np.random.default_rng(3), cfg.symbol_time)
        out.append(warmup(truth, DESK_GEOM, cfg, np.random.default_rng(4), link))
    np.testing.assert_array_equal(out[0].window.y, out[1].window.y)
    np.testing.assert_array_equal(out[0].window.W, out[1].window.W)
    np.testing.assert_array_equal(out[0].model.params, out[1].model.params)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_warmup_angle_error_default_scenario(seed):
    geom = ArrayGeometry.half_wavelength(256, 73e9)
    truth = generate_truth(TruthConfig(duration=0.2), seed)
    cfg = ProtocolConfig(duration=0.2, seed=seed)
    noise_rng, _, warm_rng = harness._streams(seed)
    th0, r0 = truth.polar(0.0)
    nv = snr_to_noise_var(20.0, geom, PolarState(float(th0), float(r0)))
    link = Link(geom, truth, (), nv, noise_rng, cfg.symbol_time)
    res = warmup(truth, geom, cfg, warm_rng, link)
    th_hat, _ = poly_eval_raw(res.model, cfg.history)
    th_true, _ = truth.polar(cfg.history)
    assert abs(th_hat - th_true) < math.radians(0.1)


# --------------------------------------------------------------------------
# closed loop


@pytest.fixture(scope="module")
def ts_run():
    return run_tracking(desk_truth(), DESK_GEOM, (), PolicySpec("ts"), short_config(feedback_ratio=0.5), "t")


def test_record_count_and_accounting(ts_run):
    cfg = short_config(feedback_ratio=0.5)
    assert len(ts_run) == cfg.num_symbols
    np.testing.assert_array_equal(ts_run.u, np.arange(cfg.num_symbols))
    # warm-up follows the schedule from u = 0, tracking from its own start
    pos = set(feedback_positions(cfg.K, cfg.feedback_count))
    U_w = cfg.warmup_symbols
    u = np.arange(cfg.num_symbols)
    k = np.where(u < U_w, u % cfg.K, (u - U_w) % cfg.K) + 1
    expected = np.array([kk in pos for kk in k])
    np.testing.assert_array_equal(ts_run.fed_back, expected)
    assert set(ts_run.provenance[:cfg.warmup_symbols]) == {"warmup"}
    tracking = ts_run.provenance[cfg.warmup_symbols:]
    assert set(tracking[ts_run.fed_back[cfg.warmup_symbols:]]) == {"ts-probe"}
    assert set(tracking[~ts_run.fed_back[cfg.warmup_symbols:]]) == {"exploit"}
    assert np.all((ts_run.gain >= 0) & (ts_run.gain <= 1))


def test_window_discipline(monkeypatch):
    cfg = short_config(feedback_ratio=0.5)
    seen = []
    real = adam_fit

    def spy(initial, geom, window, acfg=None):
        seen.append((initial.t_origin, window.u.copy()))
        return real(initial, geom, window, acfg) if acfg else real(initial, geom, window)

    monkeypatch.setattr(harness, "adam_fit", spy)
    tr = run_tracking(desk_truth(), DESK_GEOM, (), PolicySpec("exploit"), cfg)
    tracking = [(o, u) for o, u in seen if o > 0]
    origins = sorted({round(o, 9) for o, _ in tracking})
    assert len(origins) == len(tr.intervals)
    Ts = cfg.symbol_time
    fed_u = tr.u[tr.fed_back]
    for origin, u in tracking:
        t_end = origin + cfg.history
        inside = fed_u[(fed_u * Ts >= origin - 1e-12) & (fed_u * Ts < t_end - 1e-12)]
        # exactly the fed-back symbols of the trailing history window, nothing else
        np.testing.assert_array_equal(np.sort(u), inside)


def test_genie_is_exactly_one_in_pure_los():
    tr = run_tracking(desk_truth(), DESK_GEOM, (), PolicySpec("genie"), short_config())
    np.testing.assert_allclose(tr.gain, 1.0, atol=1e-12)
    assert tr.tracking_start == 0


def test_baselines_run_and_stay_unit_gain_bounded():
    scs = (Scatterer(0.5, 3.0, 0.1), Scatterer(-0.4, 6.0, 0.1j))
    for name in ("ekf", "coherence"):
        tr = run_tracking(desk_truth(), DESK_GEOM, scs, PolicySpec(name), short_config(), test_mode=True)
        assert len(tr) == short_config().num_symbols
        assert np.all((tr.gain >= 0) & (tr.gain <= 1))
        assert "sweep" in set(tr.provenance)


def test_ekf_sweep_dips():
    tr = run_tracking(desk_truth(), DESK_GEOM, (), PolicySpec("ekf"), short_config(), test_mode=True)
    sweep = tr.provenance == "sweep"
    assert sweep.sum() > 0
    payload = tr.gain[(tr.provenance == "ekf")]
    assert tr.gain[sweep].min() < 0.5 * np.median(payload)


def test_determinism_byte_identical(tmp_path, ts_run):
    again = run_tracking(desk_truth(), DESK_GEOM, (), PolicySpec("ts"), short_config(feedback_ratio=0.5), "t")
    ts_run.to_csv(tmp_path / "a.csv")
    again.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_trace_csv_round_trip(tmp_path, ts_run):
    path = tmp_path / f"{ts_run.name}.csv"
    ts_run.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert tuple(header.split(",")) == TRACE_COLUMNS
    back = read_trace_csv(path)
    np.testing.assert_array_equal(back["gain"], ts_run.gain)
    np.testing.assert_array_equal(back["r_hat"], ts_run.r_hat)
    np.testing.assert_array_equal(back["provenance"], ts_run.provenance)


def test_warm_start_needs_far_fewer_iterations(monkeypatch):
    calls = []
    real = adam_fit

    def spy(initial, geom, window, acfg=None):
        out = real(initial, geom, window, acfg) if acfg else real(initial, geom, window)
        calls.append((initial, window, acfg, out[1].iterations))
        return out

    monkeypatch.setattr(harness, "adam_fit", spy)
    cfg = short_config(duration=0.15)
    run_tracking(desk_truth(), DESK_GEOM, (), PolicySpec("exploit"), cfg)
    per_interval = [c for c in calls if c[0].t_origin > 0][:4]
    warm_iters, cold_iters = [], []
    for initial, window, acfg, iters in per_interval:
        th, r = poly_eval_raw(initial, 0.0)
        cold = MotionPoly.constant(PolarState(float(th), float(r)), initial.p_alpha, initial.p_beta,
                                   initial.time_scale, initial.t_origin)
        _, d = real(cold, DESK_GEOM, window, acfg)
        warm_iters.append(iters)
        cold_iters.append(d.iterations)
    assert sum(warm_iters) <= sum(cold_iters) / 3


# --------------------------------------------------------------------------
# summaries


def _trace(gain, start=0):
    n = len(gain)
    z = np.zeros(n)
    return RunTrace("s", "ts", 0, 1 / 30e3, 1, start, np.arange(n), z, z + 1, z, z + 1,
                    np.array(["exploit"] * n, dtype=object), np.asarray(gain, float), np.zeros(n, bool))


def test_summary_examples():
    assert summarize(_trace(np.ones(10)))["mean_gain"] == 1.0
    assert summarize(_trace([1.0, 0.0]))["mean_gain"] == 0.5
    g = np.random.default_rng(0).uniform(size=1001)
    assert summarize(_trace(g))["mean_gain"] == pytest.approx(g.sum() / g.size, rel=1e-15)
    s = summarize(_trace(np.r_[np.ones(4), np.zeros(6)], start=2))
    assert s["mean_gain"] == pytest.approx(2 / 8)
    assert s["track_loss"] and s["first_loss_t"] == pytest.approx(4 / 30e3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=200))
def test_summary_mean_matches_brute_force(gains):
    s = summarize(_trace(gains))
    assert s["mean_gain"] == pytest.approx(sum(gains) / len(gains), rel=1e-12, abs=1e-15)
    assert s["min_gain"] == min(gains)


def test_write_summary_schema(tmp_path):
    row = summarize(_trace([0.5, 0.25]))
    write_summary(tmp_path / "s.csv", [row])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert tuple(lines[0].split(",")) == SUMMARY_COLUMNS
    values = dict(zip(SUMMARY_COLUMNS, lines[1].split(",")))
    assert float(values["mean_gain"]) == row["mean_gain"]
