"""Scenario files: schema, validation and conversion to run jobs.

A scenario is a YAML document. Every physical quantity carries its unit in
the key name (``_m``, ``_s``, ``_hz``, ``_rad``, ``_deg``, ``_db``, ``_mps``).
Unknown keys are rejected. See ``default_scenario()`` for the full layout.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError

from .channel import ArrayGeometry, Scatterer, field_boundaries
from .estimator import AdamConfig
from .harness import PolicySpec, ProtocolConfig, RunJob, WarmupSpec
from .trajectory import Region, TruthConfig


class ScenarioError(ValueError):
    """Schema or physics violation; ``problems`` lists every finding."""

    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ArraySection(_Strict):
    num_elements: int = Field(256, ge=1)
    carrier_hz: float = Field(73e9, gt=0)
    spacing_m: Optional[float] = Field(None, gt=0)  # null: half wavelength


class RegionSection(_Strict):
    theta_min_rad: float = -math.pi / 3
    theta_max_rad: float = math.pi / 3
    r_min_m: float = Field(8.0, gt=0)
    r_max_m: float = Field(80.0, gt=0)


class MotionSection(_Strict):
    avg_speed_mps: float = Field(3.11, gt=0)
    max_speed_mps: float = Field(4.712, gt=0)
    waypoint_spacing_m: float = Field(2.0, gt=0)


class ScattererEntry(_Strict):
    theta_rad: float
    r1_m: float = Field(gt=0)
    reflection_re: float = 0.1
    reflection_im: float = 0.0


class ScatterersSection(_Strict):
    count: int = Field(2, ge=0)
    reflection_magnitude: float = Field(0.1, ge=0)
    # cap on |g_l| / |g_LoS| = |p| r / (r1 r2) along the path; keeps the channel LoS-dominated
    max_path_ratio: Optional[float] = Field(0.15, gt=0)
    explicit: list[ScattererEntry] = []  # overrides count when non-empty


class ProtocolSection(_Strict):
    symbol_time_s: float = Field(1.0 / 30e3, gt=0)
    interval_s: float = Field(0.010, gt=0)
    feedback_ratio: float = Field(1.0, gt=0)  # K_F = round(ratio * K)
    history_s: float = Field(0.0666, gt=0)
    duration_s: float = Field(4.0, gt=0)
    snr_db: float = 20.0
    p_alpha: int = Field(3, ge=0)
    p_beta: int = Field(6, ge=0)
    plugin_noise: bool = False


class AdamSection(_Strict):
    rho1: float = Field(0.9, gt=0, lt=1)
    rho2: float = Field(0.999, gt=0, lt=1)
    eta_alpha: float = Field(1e-4, ge=0)
    eta_beta: float = Field(1e-5, ge=0)
    eps: float = Field(1e-12, gt=0)
    max_iter: int = Field(300, ge=1)
    rel_tol: float = Field(1e-6, gt=0)


class WarmupSection(_Strict):
    angle_dither_deg: float = Field(0.5, ge=0)
    range_dither_frac: float = Field(0.02, ge=0)
    init_angle_std_deg: float = Field(0.05, ge=0)
    init_range_std_frac: float = Field(0.002, ge=0)
    max_rounds: int = Field(4, ge=1)


class PolicySection(_Strict):
    codebook_angles: Optional[int] = Field(None, ge=1)
    codebook_rings: int = Field(8, ge=1)
    ekf_period_s: float = Field(0.040, gt=0)
    ekf_q: tuple[float, float, float, float] = (1e-6, 1e-4, 1e-4, 1e-2)
    coherence_loss: float = Field(0.5, gt=0, lt=1)
    coherence_cap_s: float = Field(0.025, gt=0)
    coherence_half_widths: tuple[int, int] = (2, 1)


class SweepSection(_Strict):
    policies: list[str] = ["ts"]
    intervals_s: Optional[list[float]] = None  # null: [protocol.interval_s]
    feedback_ratios: Optional[list[float]] = None  # null: [protocol.feedback_ratio]
    seeds: list[int] = [0]


class Scenario(_Strict):
    name: str = "default"
    array: ArraySection = ArraySection()
    region: RegionSection = RegionSection()
    motion: MotionSection = MotionSection()
    scatterers: ScatterersSection = ScatterersSection()
    protocol: ProtocolSection = ProtocolSection()
    adam: AdamSection = AdamSection()
    warmup: WarmupSection = WarmupSection()
    policy: PolicySection = PolicySection()
    sweep: SweepSection = SweepSection()
    output_dir: Optional[str] = None

    _label: str = PrivateAttr("<scenario>")
    _tree: object = PrivateAttr(None)


def default_scenario() -> dict:
    return Scenario().model_dump(mode="json")


MAX_PLACEMENT_DRAWS = 1000

DESK_OVERRIDES = {
    "array.num_elements": 64,
    "region.r_min_m": 1.5,
    "region.r_max_m": 8.0,
    "motion.waypoint_spacing_m": 1.0,
    "protocol.duration_s": 1.0,
    "policy.ekf_q": [1e-6, 1.0, 1e-4, 1.0],
    "sweep.seeds": [0, 1, 2, 3, 4],
}


# --------------------------------------------------------------------------
# loading


def _node_line(node, loc) -> int | None:
    """1-based line of the YAML node at ``loc`` (deepest existing ancestor)."""
    line = None
    for key in loc:
        if node is None:
            break
        line = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == key:
                    line = k.start_mark.line + 1
                    nxt = v
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            node = None
    if node is not None:
        line = node.start_mark.line + 1
    return line


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        nxt = cur.get(k)
        if not isinstance(nxt, dict):
            nxt = {}
            cur[k] = nxt
        cur = nxt
    cur[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ScenarioError([f"override {text!r} is not key=value"])
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ScenarioError([f"override {key}: cannot parse value {raw!r}: {exc}"]) from exc
    return key.strip(), value


def load_scenario(path=None, overrides=(), desk_scale: bool = False, source: str | None = None) -> Scenario:
    """Parse, apply overrides and schema-validate a scenario document."""
    text = source if source is not None else (Path(path).read_text() if path else "")
    label = str(path) if path else "<scenario>"
    try:
        doc = yaml.safe_load(text) if text.strip() else {}
        tree = yaml.compose(text) if text.strip() else None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{label}:{mark.line + 1}" if mark else label
        raise ScenarioError([f"{where}: invalid YAML: {exc}"]) from exc
    if not isinstance(doc, dict):
        raise ScenarioError([f"{label}:1: scenario must be a mapping"])
    if desk_scale:
        for k, v in DESK_OVERRIDES.items():
            _set_path(doc, k, v)
    for item in overrides:
        k, v = item if isinstance(item, tuple) else parse_override(item)
        _set_path(doc, k, v)
    try:
        sc = Scenario.model_validate(doc)
        sc._label, sc._tree = label, tree
        return sc
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            line = _node_line(tree, loc) if tree is not None else None
            where = f"{label}:{line}" if line else label
            problems.append(f"{where}: {'.'.join(map(str, loc))}: {err['msg']}")
        raise ScenarioError(problems) from exc


# --------------------------------------------------------------------------
# conversion and physics checks


def geometry(sc: Scenario) -> ArrayGeometry:
    a = sc.array
    if a.spacing_m is None:
        return ArrayGeometry.half_wavelength(a.num_elements, a.carrier_hz)
    return ArrayGeometry(a.num_elements, a.spacing_m, a.carrier_hz)


def region(sc: Scenario) -> Region:
    r = sc.region
    return Region(r.theta_min_rad, r.theta_max_rad, r.r_min_m, r.r_max_m)


def truth_config(sc: Scenario) -> TruthConfig:
    m = sc.motion
    return TruthConfig(region(sc), m.avg_speed_mps, m.max_speed_mps, sc.protocol.duration_s, m.waypoint_spacing_m)


def protocol(sc: Scenario, interval: float | None = None, feedback_ratio: float | None = None,
             seed: int = 0) -> ProtocolConfig:
    p, a, w = sc.protocol, sc.adam, sc.warmup
    return ProtocolConfig(
        symbol_time=p.symbol_time_s,
        interval=p.interval_s if interval is None else interval,
        feedback_ratio=p.feedback_ratio if feedback_ratio is None else feedback_ratio,
        history=p.history_s, duration=p.duration_s, snr_db=p.snr_db,
        p_alpha=p.p_alpha, p_beta=p.p_beta,
        adam=AdamConfig(a.rho1, a.rho2, a.eta_alpha, a.eta_beta, a.eps, a.max_iter, a.rel_tol),
        warmup=WarmupSpec(w.angle_dither_deg, w.range_dither_frac, w.init_angle_std_deg,
                          w.init_range_std_frac, w.max_rounds),
        plugin_noise=p.plugin_noise, seed=seed,
    )


def policy_spec(sc: Scenario, name: str) -> PolicySpec:
    p = sc.policy
    return PolicySpec(name, p.codebook_angles, p.codebook_rings, p.ekf_period_s, tuple(p.ekf_q),
                      p.coherence_loss, p.coherence_cap_s, tuple(p.coherence_half_widths))


def scatterers(sc: Scenario, seed: int) -> tuple[Scatterer, ...]:
    """Explicit scatterers, or ``count`` placed at random inside the region.

    Random placements whose path would outgrow ``max_path_ratio`` of the LoS
    amplitude anywhere on the seed's trajectory are redrawn.
    """
    s = sc.scatterers
    if s.explicit:
        return tuple(Scatterer(e.theta_rad, e.r1_m, complex(e.reflection_re, e.reflection_im)) for e in s.explicit)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])
    reg = region(sc)
    th_u = r_u = None
    if s.count and s.max_path_ratio is not None and s.reflection_magnitude > 0:
        from .trajectory import generate_truth

        truth = generate_truth(truth_config(sc), seed)
        th_u, r_u = truth.polar(np.linspace(0.0, truth.duration, int(truth.duration / 1e-3) + 1))
    out = []
    for i in range(s.count):
        for _ in range(MAX_PLACEMENT_DRAWS):
            th = rng.uniform(reg.theta_min, reg.theta_max)
            r1 = rng.uniform(reg.r_min, reg.r_max)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            if th_u is None:
                break
            r2 = np.sqrt(np.maximum(r_u**2 + r1**2 - 2.0 * r_u * r1 * np.cos(th_u - th), 1e-24))
            if np.max(s.reflection_magnitude * r_u / (r1 * r2)) <= s.max_path_ratio:
                break
        else:
            raise ScenarioError([f"{sc._label}: scatterers.max_path_ratio: no placement for scatterer {i} "
                                 f"within {MAX_PLACEMENT_DRAWS} draws (seed {seed})"])
        out.append(Scatterer(th, r1, s.reflection_magnitude * complex(math.cos(phase), math.sin(phase))))
    return tuple(out)


def _violations(sc: Scenario) -> list[tuple[str, str]]:
    """(dotted key, message) for every check that needs derived quantities."""
    errs = []
    geom = geometry(sc)
    reg = sc.region
    if geom.num_elements >= 2:
        fre, ray = field_boundaries(geom)
        if reg.r_min_m <= fre:
            errs.append(("region.r_min_m", f"{reg.r_min_m} m is not beyond the Fresnel distance {fre:.4g} m"))
        if reg.r_max_m >= ray:
            errs.append(("region.r_max_m", f"{reg.r_max_m} m exceeds the Rayleigh distance {ray:.4g} m"))
    else:
        errs.append(("array.num_elements", "must be at least 2 for a near-field region"))
    if reg.r_min_m >= reg.r_max_m:
        errs.append(("region.r_min_m", "must be below region.r_max_m"))
    if not -math.pi / 2 < reg.theta_min_rad < reg.theta_max_rad < math.pi / 2:
        errs.append(("region.theta_min_rad", "angles must satisfy -pi/2 < theta_min < theta_max < pi/2"))
    if sc.motion.avg_speed_mps >= sc.motion.max_speed_mps:
        errs.append(("motion.avg_speed_mps", "must be below motion.max_speed_mps"))
    if reg.r_min_m <= geom.aperture / 2:
        errs.append(("region.r_min_m", "must exceed half the aperture"))
    intervals, ratios = sweep_axes(sc)
    dt_key = "sweep.intervals_s" if sc.sweep.intervals_s else "protocol.interval_s"
    fr_key = "sweep.feedback_ratios" if sc.sweep.feedback_ratios else "protocol.feedback_ratio"
    for dt in intervals:
        for fr in ratios:
            for key, msg in protocol_errors(sc.protocol, dt, fr):
                key = {"interval": dt_key, "feedback": fr_key}.get(key, key)
                errs.append((key, f"interval {dt} s, feedback {fr}: {msg}"))
    for name in sc.sweep.policies:
        if name not in ("ts", "exploit", "ekf", "coherence", "genie"):
            errs.append(("sweep.policies", f"unknown policy {name!r}"))
    if not sc.sweep.seeds:
        errs.append(("sweep.seeds", "must not be empty"))
    return errs


def physics_violations(sc: Scenario) -> list[str]:
    """Line-numbered messages; empty when the scenario is runnable."""
    out = []
    for key, msg in _violations(sc):
        loc = tuple(key.split("."))
        line = _node_line(sc._tree, loc) if sc._tree is not None else None
        where = f"{sc._label}:{line}" if line else sc._label
        out.append(f"{where}: {key}: {msg}")
    return out


def sweep_axes(sc: Scenario) -> tuple[list[float], list[float]]:
    """Swept intervals and feedback ratios; an unset axis falls back to the protocol value."""
    intervals = sc.sweep.intervals_s if sc.sweep.intervals_s else [sc.protocol.interval_s]
    ratios = sc.sweep.feedback_ratios if sc.sweep.feedback_ratios else [sc.protocol.feedback_ratio]
    return list(intervals), list(ratios)


def protocol_errors(p: ProtocolSection, interval: float, feedback_ratio: float) -> list[tuple[str, str]]:
    """Protocol checks for one (interval, feedback ratio) pair, keyed like ``_violations``."""
    errs = []
    k = interval / p.symbol_time_s
    if abs(k - round(k)) > 1e-6 * max(k, 1.0) or round(k) < 1:
        errs.append(("interval", f"K = interval/symbol_time = {k:.6g} is not a positive integer"))
        return errs
    K = int(round(k))
    K_F = int(round(feedback_ratio * K))
    if K_F < 1:
        errs.append(("feedback", f"K_F = round({feedback_ratio} * {K}) is below 1"))
    elif K_F > K:
        errs.append(("feedback", f"K_F = {K_F} exceeds K = {K}"))
    if p.history_s < interval:
        errs.append(("protocol.history_s", "must be at least one interval"))
    if p.duration_s <= p.history_s:
        errs.append(("protocol.duration_s", "must exceed history_s"))
    return errs


def validate(sc: Scenario) -> None:
    errs = physics_violations(sc)
    if errs:
        raise ScenarioError(errs)


def _fmt(x: float) -> str:
    return f"{x:g}".replace(".", "p")


def build_jobs(sc: Scenario, out_dir: str | None = None) -> list[RunJob]:
    """Expand the sweep axes into one job per (interval, feedback, policy, seed)."""
    validate(sc)
    geom = geometry(sc)
    jobs = []
    intervals, ratios = sweep_axes(sc)
    multi = len(intervals) > 1 or len(ratios) > 1
    for dt in intervals:
        for fr in ratios:
            scen = sc.name
            if multi:
                scen = f"{sc.name}-dt{_fmt(dt * 1e3)}ms-fb{_fmt(fr * 100)}"
            for pol in sc.sweep.policies:
                for seed in sc.sweep.seeds:
                    jid = f"{scen}|{pol}|{seed:06d}"
                    jobs.append(RunJob(jid, scen, geom, truth_config(sc), seed, scatterers(sc, seed),
                                       policy_spec(sc, pol), protocol(sc, dt, fr, seed), out_dir))
    return jobs
