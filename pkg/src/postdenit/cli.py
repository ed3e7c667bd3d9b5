"""Command line entry point: ``postdenit {simulate,compare,calibrate,gen-influent}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .biofilter import NumericalFault
from .harness import (
    CSV_COLUMNS,
    CalibrationError,
    ConfigError,
    backwash_recovery_times,
    calibrate_classical,
    compare,
    load_config,
    mass_balance,
    run_scenario,
)
from .influent import InfluentParseError, load_timeseries, write_timeseries

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("postdenit")


def _out_dir(args, spec) -> Path:
    d = Path(args.out if args.out else spec.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_simulate(args) -> int:
    spec = load_config(args.config)
    if args.mode:
        spec = replace(spec, mode=args.mode)
    out = _out_dir(args, spec)
    result = run_scenario(spec)
    csv_path = out / f"{spec.name}.csv"
    result.to_csv(csv_path)
    summary = {
        "provenance": result.provenance,
        "window": [spec.warmup, spec.duration],
        "stats": {v: result.summary(v).to_dict() for v in ("NO2_out", "NO3_out", "NOx_out", "meoh_kgd")},
        "mass_balance": mass_balance(result, spec.plant),
        "backwash_recovery_h": [
            {"t_d": tb, "hours": h if math.isfinite(h) else None}
            for tb, h in backwash_recovery_times(result, spec.mfc.y_set)
        ],
    }
    sum_path = out / f"{spec.name}_summary.json"
    _write_json(sum_path, summary)
    no2 = summary["stats"]["NO2_out"]
    print(f"{spec.name} ({spec.mode}): NO2_out mean {no2['mean']:.3f} range [{no2['min']:.3f}, {no2['max']:.3f}] gN/m3")
    print(f"wrote {csv_path} and {sum_path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    spec_a = load_config(args.config_a)
    spec_b = load_config(args.config_b)
    out = _out_dir(args, spec_a)
    a = run_scenario(spec_a)
    b = run_scenario(spec_b)
    report = compare(a, b, y_set=spec_b.mfc.y_set)
    _write_json(out / "comparison.json", report.to_dict())
    with (out / "comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("strategy",) + CSV_COLUMNS)
        for name, res in zip(report.names, (a, b)):
            for row in res.to_csv().splitlines()[1:]:
                w.writerow([name] + row.split(","))
    na, nb = report.names
    for n in report.names:
        s = report.stats[n]["NO2_out"]
        m = report.stats[n]["meoh_kgd"]
        print(f"{n:>20s}: NO2 mean {s.mean:.3f} [{s.min:.3f}, {s.max:.3f}]  methanol {m.mean:.0f} kg/d")
    print(f"NO2 range ratio {nb}/{na}: {report.no2_range_ratio:.3f}")
    print(f"methanol delta: {report.methanol_total_delta_pct:+.2f} %")
    print(f"wrote {out / 'comparison.json'} and {out / 'comparison.csv'}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    spec = replace(load_config(args.config), mode="classical")
    res = calibrate_classical(spec, target=args.target, K_range=(args.k_min, args.k_max), tol=args.tol)
    doc = {"target": args.target, "tol": args.tol, **res.to_dict()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / f"{spec.name}_calibration.json", doc)
    print(f"K* = {res.K:.6g} (mean NO2 {res.mean_NO2:.4f}, {res.iterations} bisections)")
    return EXIT_OK


def cmd_gen_influent(args) -> int:
    spec = load_config(args.config)
    out = _out_dir(args, spec)
    step = args.step if args.step else spec.sensor.dt_sample
    n = int(round(spec.duration / step))
    times = np.arange(n + 1) * step
    source = load_timeseries(spec.influent_csv) if spec.influent_csv else spec.influent
    path = out / f"{spec.name}_influent.csv"
    write_timeseries(path, times, source)
    print(f"wrote {path} ({n + 1} rows)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="postdenit", description="Simulate a post-denitrification biofilter under classical or model-free methanol dosing."
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one scenario; write CSV and summary JSON")
    s.add_argument("config")
    s.add_argument("--mode", choices=("classical", "classical+mfc"), help="override run.mode")
    s.add_argument("--out", help="output directory (default: run.output_dir)")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="run two scenarios and compare them")
    c.add_argument("config_a", help="baseline scenario")
    c.add_argument("config_b", help="candidate scenario")
    c.add_argument("--out", help="output directory (default: run.output_dir of the baseline)")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("calibrate", help="bisect the classical K on the mean effluent nitrite")
    k.add_argument("config")
    k.add_argument("--target", type=float, default=0.8, help="target mean NO2_out, gN/m3")
    k.add_argument("--tol", type=float, default=0.02)
    k.add_argument("--k-min", type=float, default=2.0)
    k.add_argument("--k-max", type=float, default=8.0)
    k.add_argument("--out", help="directory for the calibration JSON")
    k.set_defaults(func=cmd_calibrate)

    g = sub.add_parser("gen-influent", help="write the scenario influent as CSV")
    g.add_argument("config")
    g.add_argument("--step", type=float, help="sampling step in days (default: sensor.dt_sample)")
    g.add_argument("--out", help="output directory (default: run.output_dir)")
    g.set_defaults(func=cmd_gen_influent)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InfluentParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
