"""On-disk formats: RSS traces, estimate series, trained models, reports.

Traces and estimates are line-oriented comma-separated text ('#' starts a
comment) so golden files diff cleanly; models are JSON. All writes go
through a temp file and an atomic rename. Floats are written with repr so
a read-back reproduces the in-memory values bit-exactly.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .config import SiteConfig
from .errors import InputError
from .evaluation import EstimateSeries, EvaluationReport
from .geometry import LinkGeometry, NodeLayout, make_links
from .pipeline import TrainedModel
from .rssmodel import LinkStateParams, SpatialParams
from .simulator import GroundTruthTrace, Trajectory

TRACE_VERSION = 1
ESTIMATES_VERSION = 1
MODEL_VERSION = 1
REPORT_VERSION = 1


def _atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _data_lines(path: Path) -> list[list[str]]:
    lines = []
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line.split(","))
    return lines


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------


def write_trace(path: str | Path, trace: GroundTruthTrace) -> None:
    """Serialize a trace: header, then per frame all link records plus the
    ground-truth record."""
    nodes: dict[int, np.ndarray] = {}
    for link in trace.links:
        nodes.setdefault(link.tx, link.tx_coord)
        nodes.setdefault(link.rx, link.rx_coord)
    channels = sorted({link.channel for link in trace.links})

    out = ["# dfloc trace", f"V,{TRACE_VERSION}", f"P,{float(trace.frame_period)!r}"]
    for node_id in sorted(nodes):
        x, y = nodes[node_id]
        out.append(f"N,{node_id},{float(x)!r},{float(y)!r}")
    out.append("C," + ",".join(str(c) for c in channels))

    positions = trace.trajectory.positions
    for t in range(trace.n_frames):
        ts = repr(float(trace.timestamps[t]))
        for i, link in enumerate(trace.links):
            v = trace.values[t, i]
            rss = "NA" if math.isnan(v) else str(int(round(v)))
            out.append(f"R,{ts},{link.tx},{link.rx},{link.channel},{rss}")
        x, y = positions[t]
        if math.isnan(x) or math.isnan(y):
            out.append(f"G,{ts},OUT")
        else:
            out.append(f"G,{ts},{float(x)!r},{float(y)!r}")
    _atomic_write(path, "\n".join(out) + "\n")


def read_trace(path: str | Path) -> GroundTruthTrace:
    """Parse a trace file back into memory; see write_trace for the format."""
    path = Path(path)
    nodes: dict[int, np.ndarray] = {}
    channels: list[int] = []
    frame_period = None
    version = None
    rss_records: list[tuple[float, int, int, int, float]] = []
    truth_records: list[tuple[float, float, float]] = []

    try:
        for parts in _data_lines(path):
            tag = parts[0]
            if tag == "V":
                version = int(parts[1])
            elif tag == "P":
                frame_period = float(parts[1])
            elif tag == "N":
                nodes[int(parts[1])] = np.array([float(parts[2]), float(parts[3])])
            elif tag == "C":
                channels = [int(c) for c in parts[1:]]
            elif tag == "R":
                value = math.nan if parts[5] == "NA" else float(int(parts[5]))
                rss_records.append(
                    (float(parts[1]), int(parts[2]), int(parts[3]), int(parts[4]), value)
                )
            elif tag == "G":
                if parts[2] == "OUT":
                    truth_records.append((float(parts[1]), math.nan, math.nan))
                else:
                    truth_records.append((float(parts[1]), float(parts[2]), float(parts[3])))
            else:
                raise InputError(f"unknown record tag {tag!r}")
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: malformed trace record: {exc}") from exc

    if version != TRACE_VERSION:
        raise InputError(f"{path}: unsupported trace version {version}")
    if frame_period is None or not nodes or not channels:
        raise InputError(f"{path}: incomplete trace header")
    if not rss_records:
        raise InputError(f"{path}: trace holds no RSS records")

    layout = NodeLayout(nodes)
    links = make_links(layout, channels)
    link_index = {link.link_id: i for i, link in enumerate(links)}

    timestamps: list[float] = []
    for t, *_ in rss_records:
        if timestamps and t < timestamps[-1] - 1e-12:
            raise InputError(f"{path}: timestamps must be nondecreasing")
        if not timestamps or t != timestamps[-1]:
            timestamps.append(t)
    ts_array = np.asarray(timestamps)
    ts_index = {t: i for i, t in enumerate(timestamps)}

    values = np.full((len(timestamps), len(links)), np.nan)
    for t, tx, rx, ch, value in rss_records:
        key = (tx, rx, ch)
        if key not in link_index:
            raise InputError(f"{path}: record for undeclared link {key}")
        values[ts_index[t], link_index[key]] = value

    if truth_records:
        positions = np.full((len(timestamps), 2), np.nan)
        covered = np.zeros(len(timestamps), dtype=bool)
        for t, x, y in truth_records:
            if t not in ts_index:
                raise InputError(f"{path}: ground truth at {t} has no RSS frame")
            positions[ts_index[t]] = (x, y)
            covered[ts_index[t]] = True
        if not covered.all():
            raise InputError(f"{path}: ground truth must cover every frame or none")
    else:
        positions = np.full((len(timestamps), 2), np.nan)

    trajectory = Trajectory(
        timestamps=ts_array, positions=positions, frame_period=frame_period
    )
    return GroundTruthTrace(
        timestamps=ts_array,
        values=values,
        trajectory=trajectory,
        links=links,
        frame_period=frame_period,
        truth_recorded=bool(truth_records),
    )


def has_ground_truth(trace: GroundTruthTrace) -> bool:
    return trace.truth_recorded and bool(trace.trajectory.in_area().any())


def check_trace_matches_site(trace: GroundTruthTrace, site: SiteConfig) -> None:
    """Fail fast when a trace was recorded against a different layout."""
    site_links = site.links()
    if len(site_links) != len(trace.links):
        raise InputError("trace link set does not match the site config")
    for a, b in zip(site_links, trace.links):
        if a.link_id != b.link_id or not np.allclose(a.tx_coord, b.tx_coord) or not np.allclose(
            a.rx_coord, b.rx_coord
        ):
            raise InputError("trace node layout does not match the site config")


# ---------------------------------------------------------------------------
# Estimate series files
# ---------------------------------------------------------------------------


def write_estimates(path: str | Path, series: EstimateSeries) -> None:
    out = ["# dfloc estimates", f"V,{ESTIMATES_VERSION}", f"M,{series.method}"]
    for t, coord in zip(series.timestamps, series.coordinates):
        ts = repr(float(t))
        if coord is None:
            out.append(f"E,{ts},VACANT")
        else:
            out.append(f"E,{ts},{float(coord[0])!r},{float(coord[1])!r}")
    _atomic_write(path, "\n".join(out) + "\n")


def read_estimates(path: str | Path) -> EstimateSeries:
    path = Path(path)
    method = None
    version = None
    timestamps: list[float] = []
    coordinates: list[np.ndarray | None] = []
    try:
        for parts in _data_lines(path):
            tag = parts[0]
            if tag == "V":
                version = int(parts[1])
            elif tag == "M":
                method = parts[1]
            elif tag == "E":
                timestamps.append(float(parts[1]))
                if parts[2] == "VACANT":
                    coordinates.append(None)
                else:
                    coordinates.append(np.array([float(parts[2]), float(parts[3])]))
            else:
                raise InputError(f"unknown record tag {tag!r}")
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: malformed estimates record: {exc}") from exc
    if version != ESTIMATES_VERSION or method is None:
        raise InputError(f"{path}: incomplete estimates header")
    return EstimateSeries(
        method=method, timestamps=np.asarray(timestamps), coordinates=coordinates
    )


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def write_model(
    path: str | Path,
    model: TrainedModel,
    site: SiteConfig,
    links: list[LinkGeometry] | None = None,
) -> None:
    links = site.links() if links is None else links
    if len(links) != len(model.state_params):
        raise InputError("model link count does not match the site")
    tun = site.tunables
    payload = {
        "version": MODEL_VERSION,
        "site_hash": site.config_hash(),
        "globals": {
            "mean_shift_dbm": tun.mean_shift_dbm,
            "variance_scale": tun.variance_scale,
            "min_sigma_dbm": tun.min_sigma_dbm,
            "pmf_floor": tun.pmf_floor,
            "buffer_len": tun.buffer_len,
        },
        "links": [
            {
                "tx": link.tx,
                "rx": link.rx,
                "channel": link.channel,
                "mu_u": state.mu_u,
                "sigma2_u": state.sigma2_u,
                "beta": spatial.beta,
                "lambda_m": spatial.lam,
                "spatial_fallback": bool(fallback),
            }
            for link, state, spatial, fallback in zip(
                links, model.state_params, model.spatial_params, model.spatial_fallback
            )
        ],
    }
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_model(path: str | Path, site: SiteConfig) -> TrainedModel:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON: {exc}") from exc
    if payload.get("version") != MODEL_VERSION:
        raise InputError(f"{path}: unsupported model version")
    if payload.get("site_hash") != site.config_hash():
        raise InputError(f"{path}: model was trained against a different site config")
    links = site.links()
    records = payload.get("links", [])
    if len(records) != len(links):
        raise InputError(f"{path}: model link count does not match the site")
    tun = site.tunables
    state_params, spatial_params, fallback = [], [], []
    for link, rec in zip(links, records):
        if (rec["tx"], rec["rx"], rec["channel"]) != link.link_id:
            raise InputError(f"{path}: model link order does not match the site")
        mu_u, sigma2_u = float(rec["mu_u"]), float(rec["sigma2_u"])
        state_params.append(
            LinkStateParams(
                mu_u,
                sigma2_u,
                mu_u - tun.mean_shift_dbm,
                tun.variance_scale * sigma2_u,
            )
        )
        spatial_params.append(SpatialParams(float(rec["beta"]), float(rec["lambda_m"])))
        fallback.append(bool(rec.get("spatial_fallback", False)))
    return TrainedModel(
        state_params=state_params,
        spatial_params=spatial_params,
        spatial_fallback=np.asarray(fallback, dtype=bool),
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _fmt(value: float | None) -> str:
    return "NA" if value is None else f"{value:.6f}"


REPORT_COLUMNS = (
    "method,frames,median_error_m,p25_m,p75_m,p90_m,missed_detection_pct,"
    "false_alarm_pct,n_error_frames,n_truth_inside,n_truth_outside,status"
)


def report_table_rows(report: EvaluationReport) -> list[str]:
    """Machine-readable rows, one per method, deterministic per run."""
    rows = [REPORT_COLUMNS]
    for m in report.methods:
        status = "ok" if m.error is None else f"error:{m.error}"
        rows.append(
            ",".join(
                [
                    m.method,
                    str(m.frames),
                    _fmt(m.median_error_m),
                    _fmt(m.quantiles.get("p25")),
                    _fmt(m.quantiles.get("p75")),
                    _fmt(m.quantiles.get("p90")),
                    _fmt(m.missed_detection_pct),
                    _fmt(m.false_alarm_pct),
                    str(m.n_error_frames),
                    str(m.n_truth_inside),
                    str(m.n_truth_outside),
                    status.replace(",", ";"),
                ]
            )
        )
    return rows


def write_report(
    path: str | Path, report: EvaluationReport, table_path: str | Path | None = None
) -> None:
    """Line-oriented report plus an optional CSV table.

    Wall-clock runtimes stay in memory (they would break rerun-for-rerun
    byte determinism); everything written is a pure function of the inputs.
    """
    out = ["# dfloc report", f"V,{REPORT_VERSION}", f"F,frames,{report.n_frames}"]
    if report.seed is not None:
        out.append(f"F,seed,{report.seed}")
    for m in report.methods:
        out.append(f"M,{m.method}")
        if m.error is not None:
            out.append(f"X,error,{m.error.replace(',', ';')}")
            continue
        out.append(f"E,median_error_m,{_fmt(m.median_error_m)}")
        for label in ("p25", "p75", "p90"):
            out.append(f"E,{label}_m,{_fmt(m.quantiles.get(label))}")
        out.append(f"D,missed_detection_pct,{_fmt(m.missed_detection_pct)}")
        out.append(f"D,false_alarm_pct,{_fmt(m.false_alarm_pct)}")
        out.append(f"C,n_error_frames,{m.n_error_frames}")
        out.append(f"C,n_truth_inside,{m.n_truth_inside}")
        out.append(f"C,n_truth_outside,{m.n_truth_outside}")
    _atomic_write(path, "\n".join(out) + "\n")
    if table_path is not None:
        _atomic_write(table_path, "\n".join(report_table_rows(report)) + "\n")
