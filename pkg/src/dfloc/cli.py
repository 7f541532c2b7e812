"""Command-line surface: simulate -> train -> run -> evaluate.

Exit codes: 0 success, 2 bad input (malformed files, mismatched data,
missing calibration), 1 internal invariant violation.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .calibration import train_spatial_model
from .config import ScenarioConfig, SiteConfig, SiteRuntime
from .errors import InputError, InvariantError, NotCalibratedError
from .evaluation import (
    EvaluationReport,
    empty_area_means,
    evaluate_series,
    fingerprint_classes,
)
from . import evaluation, fileio
from .localizers import lda_train
from .pipeline import MplPipeline, TrainedModel
from .simulator import simulate_scenario


def _cmd_simulate(args: argparse.Namespace) -> int:
    scenario = ScenarioConfig.load(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    trace = simulate_scenario(scenario)
    fileio.write_trace(args.out, trace)
    print(f"wrote {trace.n_frames} frames x {len(trace.links)} links to {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    site = SiteConfig.load(args.site)
    trace = fileio.read_trace(args.trace)
    fileio.check_trace_matches_site(trace, site)
    runtime = SiteRuntime(site)

    if args.fixed is not None and args.true_locations:
        raise InputError("--fixed and --true-locations are mutually exclusive")
    if args.fixed is not None:
        source, truth, fixed = "fixed", None, tuple(args.fixed)
    elif args.true_locations:
        if not fileio.has_ground_truth(trace):
            raise InputError("--true-locations requires ground truth in the trace")
        source, truth, fixed = "true", trace.trajectory.positions, None
    else:
        source, truth, fixed = "krti", None, None

    result = train_spatial_model(
        trace.timestamps,
        trace.values,
        runtime.links,
        runtime.grid,
        runtime.alphabet,
        runtime.tunables,
        location_source=source,
        truth=truth,
        fixed_spatial=fixed,
    )
    model = TrainedModel.from_training(result)
    fileio.write_model(args.out, model, site, runtime.links)
    n_fallback = int(result.spatial_fallback.sum())
    print(f"trained {len(runtime.links)} links ({n_fallback} on fallback spatial params)")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    site = SiteConfig.load(args.site)
    trace = fileio.read_trace(args.trace)
    fileio.check_trace_matches_site(trace, site)
    runtime = SiteRuntime(site)
    method = args.method

    if method in ("mll", "hmml"):
        if args.model is None:
            raise InputError(f"--method {method} requires --model")
        model = fileio.read_model(args.model, site)
        pipeline = MplPipeline(runtime, model, method=method, no_walls=args.no_walls)
        coordinates = []
        for t in range(trace.n_frames):
            pixel = pipeline.step(trace.values[t], float(trace.timestamps[t]))
            coordinates.append(pipeline.estimate_coordinate(pixel))
        series = evaluation.EstimateSeries(method, trace.timestamps, coordinates)
    else:
        if method == "rti":
            source = fileio.read_trace(args.train_trace) if args.train_trace else trace
            if args.train_trace:
                fileio.check_trace_matches_site(source, site)
            if not source.truth_recorded:
                raise NotCalibratedError("rti needs a trace with its vacant segment marked")
            calibration = empty_area_means(source)
        elif method == "lda":
            if args.train_trace is None:
                raise InputError("--method lda requires --train-trace with fingerprints")
            source = fileio.read_trace(args.train_trace)
            fileio.check_trace_matches_site(source, site)
            if not fileio.has_ground_truth(source):
                raise NotCalibratedError("lda needs ground-truth labels in the training trace")
            calibration = lda_train(
                fingerprint_classes(source, runtime), shrinkage=site.tunables.lda_shrinkage
            )
        else:
            calibration = None
        series = evaluation.replay_method(runtime, method, trace, calibration)

    fileio.write_estimates(args.out, series)
    print(f"wrote {trace.n_frames} {method} estimates to {args.out}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    trace = fileio.read_trace(args.trace)
    if not trace.truth_recorded:
        raise InputError("trace carries no ground truth to evaluate against")
    truth = trace.trajectory.positions
    rows = []
    for est_path in args.estimates:
        series = fileio.read_estimates(est_path)
        if not np.array_equal(series.timestamps, trace.timestamps):
            raise InputError(f"{est_path}: timestamps do not match the trace")
        rows.append(evaluate_series(series, truth))
    report = EvaluationReport(methods=rows, n_frames=trace.n_frames)
    table = args.table if args.table else None
    fileio.write_report(args.out, report, table)
    if args.figures:
        from .figures import render_report_figures

        for path in render_report_figures(report, args.figures):
            print(f"wrote {path}")
    print(f"wrote report for {len(rows)} methods to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfloc",
        description="Device-free localization from RSS traces of a static RF mesh",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize an RSS trace from a scenario config")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", required=True, help="output trace file")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train", help="fit per-link model parameters from a walking trace")
    p.add_argument("--trace", required=True, help="training trace file")
    p.add_argument("--site", required=True, help="site config JSON")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument(
        "--true-locations",
        action="store_true",
        help="use the trace's ground truth instead of the online localizer",
    )
    p.add_argument(
        "--fixed",
        nargs=2,
        type=float,
        metavar=("BETA", "LAMBDA"),
        help="skip the spatial fit; share these decay parameters on all links",
    )
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("run", help="stream a trace through one localization method")
    p.add_argument("--trace", required=True, help="trace file to localize")
    p.add_argument("--site", required=True, help="site config JSON")
    p.add_argument("--method", required=True, choices=evaluation.METHODS)
    p.add_argument("--model", help="trained model file (mll/hmml)")
    p.add_argument(
        "--train-trace", help="calibration trace (rti: vacant segment, lda: fingerprints)"
    )
    p.add_argument(
        "--no-walls",
        action="store_true",
        help="ignore wall and entrance-exit structure in the hmml motion prior",
    )
    p.add_argument("--out", required=True, help="output estimates file")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("evaluate", help="score estimate series against ground truth")
    p.add_argument("--trace", required=True, help="trace file with ground truth")
    p.add_argument("--estimates", required=True, nargs="+", help="estimate series files")
    p.add_argument("--out", required=True, help="output report file")
    p.add_argument("--table", help="also write a CSV metric table here")
    p.add_argument("--figures", help="also render PNG figures into this directory")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
