"""Metrics and experiment orchestration.

The error series is purely positional: frames where either side reads
out-of-area never enter it. Presence/absence mismatches are counted by the
detection-rate pair instead (missed detection: person inside, method says
vacant; false alarm: area vacant, method places someone inside).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .calibration import train_spatial_model
from .config import SiteRuntime
from .errors import DflocError, InputError, NotCalibratedError
from .localizers import (
    KrtiLocalizer,
    LdaLocalizer,
    RtiLocalizer,
    VrtiLocalizer,
    build_imaging_model,
    lda_train,
)
from .pipeline import MplPipeline, TrainedModel
from .simulator import GroundTruthTrace

METHODS = ("mll", "hmml", "rti", "krti", "vrti", "lda")
_QUANTILE_LABELS = {"p25": 0.25, "p75": 0.75, "p90": 0.90}
_MIN_FINGERPRINT_FRAMES = 5


@dataclass
class EstimateSeries:
    """Per-frame coordinate estimates for one method; None means vacant."""

    method: str
    timestamps: np.ndarray
    coordinates: list[np.ndarray | None]

    def __post_init__(self) -> None:
        if len(self.coordinates) != self.timestamps.shape[0]:
            raise InputError("estimate count does not match timestamps")


def localization_error(estimate: np.ndarray | None, truth: np.ndarray | None) -> float | None:
    """Euclidean distance when both sides are in-area, else None (the frame
    belongs to the detection counters, not the distance series)."""
    if estimate is None or truth is None:
        return None
    return float(np.linalg.norm(np.asarray(estimate) - np.asarray(truth)))


def error_series(series: EstimateSeries, truth_positions: np.ndarray) -> np.ndarray:
    """Distance per frame where both estimate and truth are in-area."""
    truth_positions = np.asarray(truth_positions, dtype=float)
    if truth_positions.shape[0] != series.timestamps.shape[0]:
        raise InputError("truth length does not match the estimate series")
    errors = []
    for est, true in zip(series.coordinates, truth_positions):
        true_or_none = None if np.isnan(true).any() else true
        err = localization_error(est, true_or_none)
        if err is not None:
            errors.append(err)
    return np.asarray(errors)


def median_error(errors) -> float | None:
    """Statistical median of the error series; None when it is empty."""
    arr = np.asarray(errors, dtype=float)
    if arr.size == 0:
        return None
    return float(np.median(arr))


def detection_rates(
    series: EstimateSeries, truth_positions: np.ndarray
) -> tuple[float | None, float | None]:
    """(missed detection %, false alarm %); None when a truth class is empty."""
    truth_positions = np.asarray(truth_positions, dtype=float)
    inside = ~np.isnan(truth_positions).any(axis=1)
    est_vacant = np.array([c is None for c in series.coordinates])
    n_in = int(inside.sum())
    n_out = int((~inside).sum())
    md = 100.0 * float((inside & est_vacant).sum()) / n_in if n_in else None
    fa = 100.0 * float((~inside & ~est_vacant).sum()) / n_out if n_out else None
    return md, fa


@dataclass
class MethodReport:
    """Metrics for one method over one test trace."""

    method: str
    frames: int
    median_error_m: float | None = None
    quantiles: dict[str, float | None] = field(default_factory=dict)
    missed_detection_pct: float | None = None
    false_alarm_pct: float | None = None
    n_error_frames: int = 0
    n_truth_inside: int = 0
    n_truth_outside: int = 0
    runtime_s: float = 0.0
    error: str | None = None
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


@dataclass
class EvaluationReport:
    """Per-method metric rows plus shared run metadata."""

    methods: list[MethodReport]
    n_frames: int
    seed: int | None = None


def evaluate_series(series: EstimateSeries, truth_positions: np.ndarray) -> MethodReport:
    """Metric row for one estimate series against ground truth."""
    errors = error_series(series, truth_positions)
    md, fa = detection_rates(series, truth_positions)
    inside = ~np.isnan(np.asarray(truth_positions, dtype=float)).any(axis=1)
    quantiles: dict[str, float | None] = {}
    for label, q in _QUANTILE_LABELS.items():
        quantiles[label] = float(np.quantile(errors, q)) if errors.size else None
    return MethodReport(
        method=series.method,
        frames=series.timestamps.shape[0],
        median_error_m=median_error(errors),
        quantiles=quantiles,
        missed_detection_pct=md,
        false_alarm_pct=fa,
        n_error_frames=int(errors.size),
        n_truth_inside=int(inside.sum()),
        n_truth_outside=int((~inside).sum()),
        errors=errors,
    )


# ---------------------------------------------------------------------------
# Method calibration and replay
# ---------------------------------------------------------------------------


def empty_area_means(trace: GroundTruthTrace) -> np.ndarray:
    """Per-link mean RSS over the trace's leading vacant segment.

    Mirrors the usual deployment procedure: the area is empty for a stretch
    right after the system starts, and that stretch is the calibration.
    """
    inside = trace.trajectory.in_area()
    if inside[0]:
        raise NotCalibratedError("trace has no leading vacant segment for calibration")
    end = int(np.argmax(inside)) if inside.any() else trace.n_frames
    means = np.nanmean(trace.values[:end], axis=0)
    if np.isnan(means).any():
        raise NotCalibratedError("a link was never measured during the vacant segment")
    return means


def fingerprint_classes(
    trace: GroundTruthTrace,
    runtime: SiteRuntime,
    min_frames: int = _MIN_FINGERPRINT_FRAMES,
) -> list[tuple[np.ndarray | None, np.ndarray]]:
    """Labeled fingerprints from a ground-truth trace: frames grouped by the
    grid pixel nearest the true position, plus one out-of-area class."""
    inside = trace.trajectory.in_area()
    if not inside.any():
        raise NotCalibratedError("trace has no in-area frames to fingerprint")
    coords = runtime.grid.coordinates
    pos = trace.trajectory.positions
    classes: list[tuple[np.ndarray | None, np.ndarray]] = []
    pixel_of = np.full(trace.n_frames, -1)
    in_idx = np.nonzero(inside)[0]
    d2 = ((pos[in_idx, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    pixel_of[in_idx] = np.argmin(d2, axis=1)
    for pixel in np.unique(pixel_of[in_idx]):
        rows = np.nonzero(pixel_of == pixel)[0]
        if rows.size < min_frames:
            continue
        classes.append((coords[pixel], trace.values[rows]))
    if not classes:
        raise NotCalibratedError("no grid pixel collected enough fingerprint frames")
    out_rows = np.nonzero(~inside)[0]
    if out_rows.size >= min_frames:
        classes.append((None, trace.values[out_rows]))
    return classes


def _train_mpl(runtime: SiteRuntime, training: GroundTruthTrace) -> TrainedModel:
    result = train_spatial_model(
        training.timestamps,
        training.values,
        runtime.links,
        runtime.grid,
        runtime.alphabet,
        runtime.tunables,
    )
    return TrainedModel.from_training(result)


def replay_method(
    runtime: SiteRuntime, method: str, test: GroundTruthTrace, calibration=None
) -> EstimateSeries:
    """Stream the test trace through one method, producing coordinates."""
    tun = runtime.tunables
    grid = runtime.grid
    coordinates: list[np.ndarray | None] = []

    if method in ("mll", "hmml"):
        pipeline = MplPipeline(runtime, calibration, method=method)
        for t in range(test.n_frames):
            pixel = pipeline.step(test.values[t], float(test.timestamps[t]))
            coordinates.append(pipeline.estimate_coordinate(pixel))
        return EstimateSeries(method, test.timestamps, coordinates)

    imaging = build_imaging_model(
        runtime.links,
        grid,
        deltas=runtime.deltas,
        ellipse_width=tun.ellipse_width_m,
        regularization=tun.rti_regularization,
        ridge=tun.rti_ridge,
        vacancy_fraction=tun.vacancy_fraction,
        min_peak=tun.vacancy_min_peak,
        vacancy_smoothing=tun.vacancy_smoothing,
    )
    if method == "rti":
        localizer = RtiLocalizer(imaging, calibration)
    elif method == "krti":
        localizer = KrtiLocalizer(
            imaging,
            runtime.alphabet,
            short_window=tun.krti_short_window,
            long_window=tun.krti_long_window,
            kernel_bw=tun.krti_kernel_bw_dbm,
        )
    elif method == "vrti":
        localizer = VrtiLocalizer(imaging, runtime.links, window=tun.vrti_window)
    elif method == "lda":
        localizer = LdaLocalizer(calibration)
    else:
        raise InputError(f"unknown method {method!r}")

    for t in range(test.n_frames):
        result = localizer.step(test.values[t])
        if method == "vrti":
            coordinates.append(result.coordinate)
        elif method == "lda":
            coordinates.append(localizer.model.coordinates[result])
        else:
            coordinates.append(None if result == grid.sentinel else grid.coordinates[result])
    return EstimateSeries(method, test.timestamps, coordinates)


def run_experiment(
    runtime: SiteRuntime,
    methods: list[str],
    test: GroundTruthTrace,
    training: GroundTruthTrace | None = None,
) -> tuple[EvaluationReport, dict[str, EstimateSeries]]:
    """Calibrate each method as its type requires, replay the test trace
    through all of them, and assemble the report.

    A method whose calibration data is unavailable gets an error row; the
    run continues for the others. Returns the report and the per-method
    estimate series (methods that errored are absent from the dict).
    """
    truth_positions = test.trajectory.positions
    rows: list[MethodReport] = []
    all_series: dict[str, EstimateSeries] = {}
    mpl_model: TrainedModel | None = None

    for method in methods:
        if method not in METHODS:
            raise InputError(f"unknown method {method!r}")
        start = time.perf_counter()
        try:
            if method in ("mll", "hmml"):
                if training is None:
                    raise NotCalibratedError(f"{method} needs an unlabeled training trace")
                if mpl_model is None:
                    mpl_model = _train_mpl(runtime, training)
                calibration = mpl_model
            elif method == "rti":
                if training is None:
                    raise NotCalibratedError("rti needs a trace with vacant frames")
                calibration = empty_area_means(training)
            elif method == "lda":
                if training is None:
                    raise NotCalibratedError("lda needs a labeled fingerprint trace")
                calibration = lda_train(
                    fingerprint_classes(training, runtime),
                    shrinkage=runtime.tunables.lda_shrinkage,
                )
            else:
                calibration = None
            series = replay_method(runtime, method, test, calibration)
        except DflocError as exc:
            rows.append(
                MethodReport(method=method, frames=test.n_frames, error=str(exc))
            )
            continue
        report = evaluate_series(series, truth_positions)
        report.runtime_s = time.perf_counter() - start
        rows.append(report)
        all_series[method] = series

    return EvaluationReport(methods=rows, n_frames=test.n_frames, seed=test.seed), all_series
