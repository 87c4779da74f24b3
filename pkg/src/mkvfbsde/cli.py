"""``mkvfbsde`` command line: run a config, reproduce a table, print oracles.

Exit codes: 0 success, 1 configuration error, 2 diverged run,
3 table cell outside tolerance.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import OUTPUT_ENV, ExperimentConfig, default_output_dir, load_config
from .errors import ConfigError, UsageError
from .models import LognormalParams, PriceImpactParams, lognormal_moments, price_impact_reference
from .solvers import RunReport, solve

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_TOLERANCE = 0, 1, 2, 3

log = logging.getLogger("mkvfbsde")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_report(report_dict: dict, path: Path) -> None:
    path.write_text(json.dumps(_jsonable(report_dict), indent=2, sort_keys=True) + "\n")


def write_losses(report: RunReport, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, loss in enumerate(report.losses):
            w.writerow([i, repr(loss)])


def write_law(report: RunReport, path: Path) -> None:
    traj = report.law_trajectory or []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        if not traj:
            w.writerow(["step", "t"])
            return
        header = ["step", "t"]
        for comp in ("uX", "uY", "uZ"):
            header += [f"{comp}_{j}" for j in range(len(traj[0][comp]))]
        w.writerow(header)
        for row in traj:
            w.writerow([row["step"], repr(row["t"])] + [repr(v) for c in ("uX", "uY", "uZ") for v in row[c]])


def _run_dirs(exp: ExperimentConfig) -> list[Path]:
    if exp.repetitions == 1:
        return [exp.output_dir]
    return [exp.output_dir / f"rep{r:03d}" for r in range(exp.repetitions)]


def cmd_run(args) -> int:
    exp = load_config(args.config)
    if args.out:
        exp.output_dir = Path(args.out)
    model, grid = exp.model(), exp.grid
    status = EXIT_OK
    finals = []
    for r, out in enumerate(_run_dirs(exp)):
        cfg = exp.solver.replace(seed=exp.solver.seed + r)
        report = solve(model, grid, cfg)
        out.mkdir(parents=True, exist_ok=True)
        doc = report.to_dict()
        doc["experiment"] = exp.to_dict()
        doc["experiment"]["solver"]["seed"] = cfg.seed
        if not exp.law_trajectory:
            doc["law_trajectory"] = None
        # timing lives apart from the numerics so reruns compare byte-for-byte
        timing = {"duration_seconds": doc.pop("duration")}
        write_report(doc, out / "report.json")
        write_report(timing, out / "timing.json")
        write_losses(report, out / "loss.csv")
        if exp.law_trajectory:
            write_law(report, out / "law.csv")
        if report.diverged:
            print(f"{out}: diverged: {report.message}", file=sys.stderr)
            status = EXIT_DIVERGED
        else:
            finals.append(report.x_T_mean)
            print(f"{out}: E[X_T] mean {report.x_T_mean:.6f} (sd over coordinates {report.x_T_sd:.2e}), "
                  f"Y0 {report.y0[0]:.6f}, {len(report.losses)} iterations, status {report.status}")
    if len(finals) > 1:
        print(f"over {len(finals)} repetitions: mean {np.mean(finals):.6f}, sd {np.std(finals):.2e}")
    return status


def cmd_table(args) -> int:
    if args.table not in bench.TABLES:
        raise UsageError(f"unknown table {args.table!r}; available: {', '.join(bench.TABLES)}")
    spec = bench.TABLES[args.table]
    methods = set(args.methods.split(",")) if args.methods else None
    maturities = {float(t) for t in args.maturities.split(",")} if args.maturities else None
    if methods is not None:
        unknown = methods - {c.method.label for c in spec.cells}
        if unknown:
            raise UsageError(f"unknown method(s) {sorted(unknown)} for table {args.table}")
    spec = spec.select(methods, maturities)
    out = Path(args.out) if args.out else default_output_dir() / f"table-{args.table}-{args.scale}"
    out.mkdir(parents=True, exist_ok=True)

    header = bench.scale_header(spec, args.scale, args.iterations)
    results = bench.run_table(spec, args.scale, args.iterations, args.seed, args.jobs)
    rows = bench.format_rows(results)

    lines = header + [",".join(bench.COLUMNS)] + [",".join(r) for r in rows]
    (out / "table.csv").write_text("\n".join(lines) + "\n")
    for res in results:
        tag = f"{res.cell.method.label}_T{res.cell.T:g}".replace(" ", "_").replace("(", "").replace(")", "")
        write_report(bench.cell_report(res), out / f"{tag}.json")
    print("\n".join(lines))
    return EXIT_TOLERANCE if any(r.outcome == "fail" for r in results) else EXIT_OK


ORACLES = ("price-impact", "lognormal")


def cmd_oracle(args) -> int:
    if args.model not in ORACLES:
        raise UsageError(f"no oracle for {args.model!r}; available: {', '.join(ORACLES)}")
    rows = []
    for t in args.times:
        if t < 0:
            raise UsageError(f"time must be nonnegative, got {t}")
        if args.model == "price-impact":
            rows.append(f"{t:g}\tE[X_t]={price_impact_reference(PriceImpactParams(), t):.6f}")
        else:
            mx, mx2, my, my2, mz, mz2 = lognormal_moments(LognormalParams(), t)
            rows.append(f"{t:g}\tE[X_t]={mx:.6f}\tE[X_t^2]={mx2:.6f}\tE[Y_t]={my:.6f}"
                        f"\tE[Y_t^2]={my2:.6f}\tE[Z_t]={mz:.6f}\tE[Z_t^2]={mz2:.6f}")
    print("\n".join(rows))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage, which is taken by diverged runs."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mkvfbsde", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train the solver described by a config file")
    run.add_argument("config")
    run.add_argument("--out", help=f"output directory (overrides the config and ${OUTPUT_ENV})")
    run.set_defaults(func=cmd_run)

    table = sub.add_parser("table", help="reproduce a benchmark table")
    table.add_argument("table", help=" | ".join(bench.TABLES))
    table.add_argument("--scale", choices=("desk", "full"), default="desk")
    table.add_argument("--out")
    table.add_argument("--methods", help="comma-separated method labels to keep")
    table.add_argument("--maturities", help="comma-separated maturities to keep")
    table.add_argument("--iterations", type=int, help="override the outer iteration count")
    table.add_argument("--seed", type=int, default=0)
    table.add_argument("--jobs", type=int, default=1, help="cells trained in parallel")
    table.set_defaults(func=cmd_table)

    oracle = sub.add_parser("oracle", help="print reference values")
    oracle.add_argument("model", help="price-impact or lognormal")
    oracle.add_argument("times", nargs="+", type=float)
    oracle.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
