"""Command-line front end: ``run``, ``experiments`` and ``validate``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .harness import run_jobs, write_summary
from .plotting import line_chart

OUT_ENV = "NFTRACK_OUT_DIR"

EXPERIMENTS = {
    "fig3": {"sweep.intervals_s": [0.005, 0.010, 0.020, 0.040], "sweep.policies": ["ts", "exploit"],
             "sweep.feedback_ratios": [1.0]},
    "fig4": {"sweep.intervals_s": [0.010], "sweep.policies": ["ts"],
             "sweep.feedback_ratios": [0.25, 0.5, 0.75, 1.0]},
    "fig5": {"sweep.intervals_s": [0.010], "sweep.policies": ["ts", "ekf", "coherence", "genie"],
             "sweep.feedback_ratios": [0.75]},
}

log = logging.getLogger("nftrack")


def _out_dir(args, sc) -> Path:
    out = args.out or sc.output_dir or os.environ.get(OUT_ENV) or "results"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load(args, extra=None):
    overrides = [cfgmod.parse_override(s) for s in (args.set or [])]
    if extra:
        overrides = [(k, v) for k, v in extra.items()] + overrides
    if getattr(args, "seed", None) is not None:
        overrides.append(("sweep.seeds", [args.seed]))
    return cfgmod.load_scenario(args.scenario, overrides, desk_scale=args.desk_scale)


def _execute(sc, out: Path, jobs_n: int):
    jobs = cfgmod.build_jobs(sc, str(out))
    log.info("running %d job(s) with %d worker(s)", len(jobs), jobs_n)
    results = run_jobs(jobs, jobs_n)
    rows, failed = [], []
    for jid, row, err in results:
        if err:
            failed.append(f"{jid}: {err}")
        else:
            rows.append(row)
    return rows, failed


def _plot_sweeps(rows, out: Path, prefix: str = "") -> list[Path]:
    paths = []
    by = defaultdict(list)
    for r in rows:
        by[(r["policy"], r["interval_s"], r["feedback_ratio"])].append(r["mean_gain"])
    policies = sorted({k[0] for k in by})
    intervals = sorted({k[1] for k in by})
    ratios = sorted({k[2] for k in by})
    if len(intervals) > 1:
        series = []
        for p in policies:
            for fr in ratios:
                xs = [dt * 1e3 for dt in intervals if (p, dt, fr) in by]
                ys = [float(np.mean(by[(p, dt, fr)])) for dt in intervals if (p, dt, fr) in by]
                series.append((p if len(ratios) == 1 else f"{p} fb={fr:g}", xs, ys))
        path = out / f"{prefix}gain_vs_interval.svg"
        line_chart(path, series, "Mean normalized gain vs MLE interval", "interval (ms)", "mean gain",
                   markers=True)
        paths.append(path)
    if len(ratios) > 1:
        series = []
        for p in policies:
            for dt in intervals:
                xs = [fr * 100 for fr in ratios if (p, dt, fr) in by]
                ys = [float(np.mean(by[(p, dt, fr)])) for fr in ratios if (p, dt, fr) in by]
                series.append((p if len(intervals) == 1 else f"{p} {dt * 1e3:g} ms", xs, ys))
        path = out / f"{prefix}gain_vs_feedback.svg"
        line_chart(path, series, "Mean normalized gain vs feedback ratio", "feedback ratio (%)", "mean gain",
                   markers=True)
        paths.append(path)
    return paths


def _finish(rows, failed, out: Path, summary_name: str) -> int:
    write_summary(out / summary_name, rows)
    for line in failed:
        print(f"run failed: {line}", file=sys.stderr)
    print(f"wrote {len(rows)} run(s) to {out}")
    return 2 if failed else 0


def cmd_run(args) -> int:
    sc = _load(args)
    out = _out_dir(args, sc)
    rows, failed = _execute(sc, out, args.jobs)
    _plot_sweeps(rows, out)
    return _finish(rows, failed, out, "summary.csv")


def cmd_experiments(args) -> int:
    sc = _load(args, EXPERIMENTS[args.figure])
    sc = sc.model_copy(update={"name": args.figure})
    out = _out_dir(args, sc)
    rows, failed = _execute(sc, out, args.jobs)
    if args.figure in ("fig3", "fig4"):
        _plot_sweeps(rows, out, f"{args.figure}_")
    if args.figure in ("fig4", "fig5"):
        _plot_time(rows, out, args.figure, sc.sweep.seeds[0])
    return _finish(rows, failed, out, f"{args.figure}_table.csv")


def _plot_time(rows, out: Path, figure: str, seed: int) -> None:
    from .harness import read_trace_csv
    from .plotting import binned

    series = []
    for r in rows:
        if r["seed"] != seed:
            continue
        tr = read_trace_csv(out / f"{r['scenario']}_{r['policy']}_{r['seed']}.csv")
        t, g = binned(tr["t"], tr["gain"], 1e-3)
        label = r["policy"] if figure == "fig5" else f"{r['feedback_ratio'] * 100:g}% feedback"
        series.append((label, t, g))
    line_chart(out / f"{figure}_gain_vs_time.svg", series, "Normalized gain vs time (1 ms bins)",
               "time (s)", "normalized gain", ylim=(0.0, 1.05))


def cmd_validate(args) -> int:
    sc = _load(args)
    cfgmod.validate(sc)
    print("scenario is valid")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nftrack", description="Near-field beam tracking simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--scenario", type=Path, help="scenario YAML (defaults apply when omitted)")
        p.add_argument("--desk-scale", action="store_true", help="N=64, T=1 s, 5 seeds, desk-sized region")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scenario key (dotted path)")
        if seeds:
            p.add_argument("--seed", type=int, help="run this single seed")
            p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./results)")
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("run", help="run the scenario's sweep matrix")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("experiments", help="reproduce one of the figure experiments")
    p.add_argument("figure", choices=sorted(EXPERIMENTS))
    common(p)
    p.set_defaults(func=cmd_experiments)
    p = sub.add_parser("validate", help="check a scenario without running it")
    common(p, seeds=False)
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except cfgmod.ScenarioError as exc:
        for line in exc.problems:
            print(line, file=sys.stderr)
        return 1
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
