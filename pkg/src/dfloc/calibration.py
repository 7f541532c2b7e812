"""Parameter learning: robust unaffected-distribution estimation, the
one-time unsupervised spatial-decay fit driven by kernel-distance imaging
location estimates, and the runtime recalibration that keeps the link
models current in a changing environment.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import Tunables
from .errors import InputError, InsufficientDataError
from .geometry import Grid, LinkArrays, LinkGeometry, delta_table
from .localizers import KrtiLocalizer, build_imaging_model
from .rssmodel import (
    Alphabet,
    ConditionalPmf,
    LinkStateParams,
    SpatialParams,
    build_conditional_pmf,
    is_missing,
)

BETA_MIN = 1e-5
BETA_MAX = 1.0 - 1e-9
LAMBDA_SEARCH_LO = 0.01
LAMBDA_SEARCH_HI = 50.0
LAMBDA_GRID_SIZE = 60
_INV_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# Robust estimation and the runtime FIFO buffers
# ---------------------------------------------------------------------------


def robust_unaffected_estimate(samples, min_sigma: float = 0.75) -> tuple[float, float]:
    """Median / scaled-MAD estimate of the unaffected Gaussian.

    The median and MAD shrug off the minority of samples recorded while the
    link was actually affected. The MAD is scaled by 1.48 to estimate a
    Gaussian standard deviation, squared, and floored at min_sigma**2.
    """
    arr = np.asarray([s for s in samples if not is_missing(s)], dtype=float)
    if arr.size < 2:
        raise InsufficientDataError("need at least 2 samples for a robust estimate")
    mu = float(np.median(arr))
    mad = float(np.median(np.abs(arr - mu)))
    sigma2 = max((1.48 * mad) ** 2, min_sigma**2)
    return mu, sigma2


class LinkBuffer:
    """FIFO of the most recent presumed-unaffected samples for one link.

    Keeps running first and second moments so the mean/variance checks on
    every append stay O(1). ``committed_mu`` is the unaffected mean the
    localizers currently use.
    """

    def __init__(self, capacity: int, committed_mu: float):
        if capacity < 2:
            raise InputError("buffer capacity must be at least 2")
        self.capacity = capacity
        self.committed_mu = committed_mu
        self._values: deque[float] = deque()
        self._s1 = 0.0
        self._s2 = 0.0

    def __len__(self) -> int:
        return len(self._values)

    @property
    def full(self) -> bool:
        return len(self._values) == self.capacity

    def append(self, r: float) -> None:
        if self.full:
            old = self._values.popleft()
            self._s1 -= old
            self._s2 -= old * old
        self._values.append(r)
        self._s1 += r
        self._s2 += r * r

    def mean(self) -> float:
        return self._s1 / len(self._values)

    def variance(self) -> float:
        """Sample variance (ddof=1); exact because entries are integers."""
        n = len(self._values)
        if n < 2:
            return 0.0
        m = self._s1 / n
        return max((self._s2 - n * m * m) / (n - 1), 0.0)


def push_unaffected(
    buffer: LinkBuffer,
    r: float,
    delta_vrti: float,
    delta_max: float,
    mpl_says_vacant: bool,
) -> bool:
    """Append r when evidence says the link is unaffected right now.

    Opens on either gate: the motion image places the person far from the
    link (excess path length beyond half its grid maximum), or the mixture
    localizer reads the whole area as vacant. Gated-out samples are
    silently dropped.
    """
    if is_missing(r):
        raise InputError("missing samples never enter the buffer")
    if delta_vrti > delta_max / 2.0 or mpl_says_vacant:
        buffer.append(float(r))
        return True
    return False


def recalibrate(
    buffer: LinkBuffer,
    threshold_dbm: float = 1.0,
    min_sigma: float = 0.75,
) -> tuple[float, float] | None:
    """Commit new unaffected parameters when the buffer has drifted.

    Only acts on a full buffer, and only when the buffer mean sits more
    than threshold_dbm away from the committed mean. Returns the committed
    (mu, sigma2) or None when nothing changed.
    """
    if not buffer.full:
        return None
    mu_hat = buffer.mean()
    if abs(buffer.committed_mu - mu_hat) <= threshold_dbm:
        return None
    sigma2_hat = max(buffer.variance(), min_sigma**2)
    buffer.committed_mu = mu_hat
    return mu_hat, sigma2_hat


# ---------------------------------------------------------------------------
# Training-walk data containers
# ---------------------------------------------------------------------------


@dataclass
class TrainingTuples:
    """(RSS, excess-path-length) pairs collected during the training walk.

    Stored as aligned (n_collected, L) matrices; NaN marks links without a
    sample in a given collected frame.
    """

    values: np.ndarray
    deltas: np.ndarray

    def link_tuples(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        present = ~np.isnan(self.values[:, l])
        return self.values[present, l], self.deltas[present, l]


def bin_training_tuples(
    rss: np.ndarray,
    deltas: np.ndarray,
    alphabet: Alphabet,
    bin_width: float = 0.1,
    min_count: int = 20,
) -> tuple[np.ndarray, np.ndarray]:
    """Group one link's tuples into excess-path-length bins.

    Deltas fall into consecutive bin_width-wide intervals [0, w), [w, 2w),
    ...; bins holding fewer than min_count samples are discarded. Each
    surviving bin is represented by the mean delta of its members (truer
    than the interval midpoint when samples cluster inside the bin).
    Returns (bin centers (M,), normalized RSS histograms (M, n_values))
    with centers ascending.
    """
    rss = np.asarray(rss, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    if rss.size == 0:
        raise InsufficientDataError("no tuples to bin")
    keys = np.floor(deltas / bin_width + 1e-9).astype(int)
    idx = np.round(rss).astype(int) - alphabet.lo
    if idx.min() < 0 or idx.max() >= alphabet.n_values:
        raise InputError("RSS outside the alphabet")
    centers = []
    hists = []
    for key in np.unique(keys):
        sel = keys == key
        if sel.sum() < min_count:
            continue
        hist = np.bincount(idx[sel], minlength=alphabet.n_values).astype(float)
        centers.append(float(deltas[sel].mean()))
        hists.append(hist / hist.sum())
    if not centers:
        raise InsufficientDataError("every excess-path-length bin is under min_count")
    return np.asarray(centers), np.stack(hists)


def mixture_weight_candidates(n: int = 100) -> np.ndarray:
    """Equally spaced candidate affected-weights spanning (almost) [0, 1]."""
    return np.linspace(1e-5, 1.0, n)


def fit_mixture_weight(
    h: np.ndarray,
    pmf_a: ConditionalPmf,
    pmf_u: ConditionalPmf,
    candidates: np.ndarray | None = None,
) -> float:
    """Affected weight whose two-component mixture best matches a histogram.

    Minimizes the Euclidean distance between b*pmf_a + (1-b)*pmf_u and h
    over the candidate grid (missing event excluded); ties break toward
    smaller b.
    """
    if candidates is None:
        candidates = mixture_weight_candidates()
    h = np.asarray(h, dtype=float)
    a = pmf_a.masses
    u = pmf_u.masses
    base = u - h
    d = a - u
    # ||base + b d||^2 as a quadratic in b; argmin picks the first (smallest b) tie
    sq = base @ base + 2.0 * candidates * (base @ d) + candidates**2 * (d @ d)
    return float(candidates[int(np.argmin(sq))])


@dataclass
class MixtureWeightCurve:
    """Best-fit affected weight per excess-path-length bin for one link."""

    deltas: np.ndarray
    weights: np.ndarray


def _spatial_sse(lam: float, deltas: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
    g = np.exp(-deltas / lam)
    denom = g @ g
    beta = float(np.clip((weights @ g) / denom, BETA_MIN, BETA_MAX)) if denom > 0 else BETA_MIN
    resid = beta * g - weights
    return float(resid @ resid), beta


def fit_spatial_params(
    curve: MixtureWeightCurve,
    lam_lo: float = LAMBDA_SEARCH_LO,
    lam_hi: float = LAMBDA_SEARCH_HI,
    grid_size: int = LAMBDA_GRID_SIZE,
) -> SpatialParams:
    """Constrained least-squares fit of the exponential spatial decay.

    Scans a log-spaced decay-length grid, solving the scale in closed form
    (clamped inside (0, 1)) at each point, then refines the best decay
    length by golden-section search on the log axis. Derivative-free and
    immune to local-minimum surprises at this problem size.
    """
    deltas = np.asarray(curve.deltas, dtype=float)
    weights = np.asarray(curve.weights, dtype=float)
    if np.unique(deltas).size < 2:
        raise InsufficientDataError("need at least 2 distinct excess path lengths")

    grid = np.geomspace(lam_lo, lam_hi, grid_size)
    sses = np.array([_spatial_sse(lam, deltas, weights)[0] for lam in grid])
    best = int(np.argmin(sses))

    lo = math.log(grid[max(best - 1, 0)])
    hi = math.log(grid[min(best + 1, grid_size - 1)])
    a, b = lo, hi
    c = b - _INV_GOLDEN * (b - a)
    d = a + _INV_GOLDEN * (b - a)
    fc = _spatial_sse(math.exp(c), deltas, weights)[0]
    fd = _spatial_sse(math.exp(d), deltas, weights)[0]
    while b - a > 1e-10:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_GOLDEN * (b - a)
            fc = _spatial_sse(math.exp(c), deltas, weights)[0]
        else:
            a, c, fc = c, d, fd
            d = a + _INV_GOLDEN * (b - a)
            fd = _spatial_sse(math.exp(d), deltas, weights)[0]
    lam = math.exp((a + b) / 2.0)
    _, beta = _spatial_sse(lam, deltas, weights)
    return SpatialParams(beta=beta, lam=lam)


# ---------------------------------------------------------------------------
# The one-time unsupervised training pass
# ---------------------------------------------------------------------------


@dataclass
class TrainingResult:
    """Per-link fitted parameters plus which links fell back to defaults."""

    state_params: list[LinkStateParams]
    spatial_params: list[SpatialParams]
    spatial_fallback: np.ndarray  # (L,) bool
    tuples: TrainingTuples | None = field(default=None, repr=False)


def train_spatial_model(
    timestamps: np.ndarray,
    values: np.ndarray,
    links: list[LinkGeometry],
    grid: Grid,
    alphabet: Alphabet,
    tunables: Tunables | None = None,
    location_source: str = "krti",
    truth: np.ndarray | None = None,
    fixed_spatial: tuple[float, float] | None = None,
    keep_tuples: bool = False,
) -> TrainingResult:
    """Unsupervised training pass over a walking trace.

    Replays the trace through the kernel-distance localizer (or uses the
    supplied true positions when location_source="true"), collecting
    per-link (RSS, excess path length) tuples whenever the person is placed
    in the area. Unaffected Gaussians come from the robust estimator over
    each link's full training RSS; affected ones are derived from them.
    The spatial decay is then fit per link from the binned tuples, falling
    back to the configured defaults for links the walk never exercised.

    With location_source="fixed" the localization and fitting stages are
    skipped entirely and every link shares ``fixed_spatial``.
    """
    tun = tunables or Tunables()
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] == 0:
        raise InsufficientDataError("training trace is empty")
    if values.shape[1] != len(links):
        raise InputError("trace link count does not match the layout")
    if np.asarray(timestamps).shape[0] != values.shape[0]:
        raise InputError("timestamps do not match the frame count")
    n_frames, n_links = values.shape

    if location_source not in ("krti", "true", "fixed"):
        raise InputError(f"unknown location source {location_source!r}")
    if location_source == "true" and truth is None:
        raise InputError("location_source='true' requires ground-truth positions")
    if location_source == "fixed" and fixed_spatial is None:
        raise InputError("location_source='fixed' requires fixed_spatial")

    # Stage 1: location estimates -> (rss, delta) tuples per link.
    tuples = None
    if location_source != "fixed":
        link_arrays = LinkArrays.from_links(links)
        estimates = _training_positions(values, links, grid, alphabet, tun, location_source, truth)
        rows = [t for t, pos in enumerate(estimates) if pos is not None]
        delta_rows = np.full((len(rows), n_links), np.nan)
        value_rows = np.full((len(rows), n_links), np.nan)
        for i, t in enumerate(rows):
            delta_rows[i] = link_arrays.point_deltas(estimates[t])
            value_rows[i] = values[t]
        tuples = TrainingTuples(values=value_rows, deltas=delta_rows)

    # Stage 2: robust per-link state parameters from the whole walk.
    state_params: list[LinkStateParams] = []
    pending: list[int] = []
    for l in range(n_links):
        col = values[:, l]
        col = col[~np.isnan(col)]
        try:
            mu_u, sigma2_u = robust_unaffected_estimate(col, tun.min_sigma_dbm)
        except InsufficientDataError:
            pending.append(l)
            state_params.append(None)  # type: ignore[arg-type]
            continue
        mu_a = mu_u - tun.mean_shift_dbm
        sigma2_a = tun.variance_scale * sigma2_u
        state_params.append(LinkStateParams(mu_u, sigma2_u, mu_a, sigma2_a))
    fitted = [p for p in state_params if p is not None]
    if not fitted:
        raise InsufficientDataError("training trace holds no usable RSS")
    if pending:  # links the trace never measured: borrow the cross-link median
        mu_med = float(np.median([p.mu_u for p in fitted]))
        s2_med = float(np.median([p.sigma2_u for p in fitted]))
        stand_in = LinkStateParams(
            mu_med, s2_med, mu_med - tun.mean_shift_dbm, tun.variance_scale * s2_med
        )
        for l in pending:
            state_params[l] = stand_in

    # Stage 3: spatial decay per link.
    spatial_params: list[SpatialParams] = []
    fallback = np.zeros(n_links, dtype=bool)
    default_spatial = SpatialParams(tun.fallback_beta, tun.fallback_lambda_m)
    if location_source == "fixed":
        beta, lam = fixed_spatial
        shared = SpatialParams(beta, lam)
        spatial_params = [shared] * n_links
    else:
        candidates = mixture_weight_candidates(tun.mixture_weight_candidates)
        for l in range(n_links):
            rss_l, delta_l = tuples.link_tuples(l)
            sp = state_params[l]
            try:
                centers, hists = bin_training_tuples(
                    rss_l, delta_l, alphabet, tun.epl_bin_width_m, tun.epl_bin_min_count
                )
                pmf_a = build_conditional_pmf(sp.mu_a, sp.sigma2_a, alphabet, tun.pmf_floor)
                pmf_u = build_conditional_pmf(sp.mu_u, sp.sigma2_u, alphabet, tun.pmf_floor)
                bstar = np.array(
                    [fit_mixture_weight(h, pmf_a, pmf_u, candidates) for h in hists]
                )
                spatial = fit_spatial_params(MixtureWeightCurve(centers, bstar))
            except InsufficientDataError:
                spatial = default_spatial
                fallback[l] = True
            spatial_params.append(spatial)

    return TrainingResult(
        state_params=state_params,
        spatial_params=spatial_params,
        spatial_fallback=fallback,
        tuples=tuples if keep_tuples else None,
    )


def _training_positions(
    values: np.ndarray,
    links: list[LinkGeometry],
    grid: Grid,
    alphabet: Alphabet,
    tun: Tunables,
    location_source: str,
    truth: np.ndarray | None,
) -> list[np.ndarray | None]:
    """Per-frame in-area position estimates (None when out / unknown)."""
    n_frames = values.shape[0]
    if location_source == "true":
        truth = np.asarray(truth, dtype=float)
        if truth.shape != (n_frames, 2):
            raise InputError("truth positions must be (n_frames, 2)")
        return [None if np.isnan(truth[t]).any() else truth[t] for t in range(n_frames)]

    deltas = delta_table(grid, links)
    imaging = build_imaging_model(
        links,
        grid,
        deltas=deltas,
        ellipse_width=tun.ellipse_width_m,
        regularization=tun.rti_regularization,
        ridge=tun.rti_ridge,
        vacancy_fraction=tun.vacancy_fraction,
        min_peak=tun.vacancy_min_peak,
        vacancy_smoothing=tun.vacancy_smoothing,
    )
    krti = KrtiLocalizer(
        imaging,
        alphabet,
        short_window=tun.krti_short_window,
        long_window=tun.krti_long_window,
        kernel_bw=tun.krti_kernel_bw_dbm,
    )
    positions: list[np.ndarray | None] = []
    for t in range(n_frames):
        pixel = krti.step(values[t])
        positions.append(None if pixel == grid.sentinel else grid.coordinates[pixel])
    return positions


# ---------------------------------------------------------------------------
# Runtime continuous recalibration
# ---------------------------------------------------------------------------


class ContinuousRecalibrator:
    """Per-link buffers plus the gate logic, driven once per frame.

    Single writer: commits replace whole parameter snapshots that readers
    (the likelihood engine) pick up between frames.
    """

    def __init__(
        self,
        initial_mu: np.ndarray,
        delta_max: np.ndarray,
        buffer_len: int = 15,
        threshold_dbm: float = 1.0,
        min_sigma: float = 0.75,
    ):
        self.buffers = [LinkBuffer(buffer_len, float(mu)) for mu in initial_mu]
        self.delta_max = np.asarray(delta_max, dtype=float)
        self.threshold_dbm = threshold_dbm
        self.min_sigma = min_sigma

    def observe(
        self,
        values: np.ndarray,
        delta_vrti: np.ndarray,
        mpl_says_vacant: bool,
    ) -> list[tuple[int, float, float]]:
        """Gate one frame into the buffers; returns committed updates as
        (link index, mu_u, sigma2_u) triples."""
        present = ~np.isnan(values)
        gate = present & ((delta_vrti > self.delta_max / 2.0) | mpl_says_vacant)
        updates = []
        for l in np.nonzero(gate)[0]:
            buffer = self.buffers[l]
            buffer.append(float(values[l]))
            committed = recalibrate(buffer, self.threshold_dbm, self.min_sigma)
            if committed is not None:
                updates.append((int(l), committed[0], committed[1]))
        return updates
