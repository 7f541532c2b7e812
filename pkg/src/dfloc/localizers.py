"""Location estimators sharing one grid: the mixture-likelihood pair
(single-frame argmax and forward-filtered HMM), the regularized
least-squares imaging baselines (mean-deviation, kernel-distance, and
variance flavors), and the fingerprint discriminant classifier.

Each estimator is a single-threaded state machine consuming frame vectors
in timestamp order; distinct instances over the same immutable models may
run concurrently.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, InputError, InsufficientDataError, InvariantError
from .geometry import Grid, LinkArrays, LinkGeometry, delta_table, lattice_difference_pairs
from .rssmodel import Alphabet, LikelihoodMap

DEFAULT_SELF_TRANSITION = 0.9
DEFAULT_TRANSITION_FLOOR = 1e-200
DEFAULT_INITIAL_OUT_PROB = 0.95
DEFAULT_ELLIPSE_WIDTH_M = 0.05
DEFAULT_REGULARIZATION = 1.3
DEFAULT_RIDGE = 0.1
DEFAULT_VACANCY_FRACTION = 0.5
DEFAULT_VACANCY_SMOOTHING = 8
DEFAULT_KRTI_SHORT_WINDOW = 6
DEFAULT_KRTI_LONG_WINDOW = 30
DEFAULT_KRTI_KERNEL_BW = 4.0
DEFAULT_VRTI_WINDOW = 10


# ---------------------------------------------------------------------------
# Transition structure and the forward filter
# ---------------------------------------------------------------------------


@dataclass
class TransitionModel:
    """Row-stochastic motion prior over pixel indices 0..P, stored sparsely.

    Every state keeps ``self_probs[k]`` mass in place, gives each
    non-neighbor the scalar ``floor``, and splits the remainder equally
    among its neighbors. ``pi`` is the initial state distribution.
    """

    pi: np.ndarray
    self_probs: np.ndarray
    floor: float
    adjacency: list[np.ndarray]
    neighbor_share: np.ndarray
    _propagator: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = len(self.pi)
        rows, cols, data = [], [], []
        for w in range(n):
            rows.append(w)
            cols.append(w)
            data.append(self.self_probs[w] - self.floor)
            for k in self.adjacency[w]:
                rows.append(w)
                cols.append(int(k))
                data.append(self.neighbor_share[w] - self.floor)
        corr = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
        self._propagator = corr.T.tocsr()

    @property
    def n_states(self) -> int:
        return len(self.pi)

    def propagate(self, alpha: np.ndarray) -> np.ndarray:
        """Right-multiply a row vector by the transition matrix."""
        return self.floor * alpha.sum() + self._propagator @ alpha

    def dense(self) -> np.ndarray:
        """Materialize the full matrix (tests and small grids only)."""
        n = self.n_states
        mat = np.full((n, n), self.floor)
        for w in range(n):
            mat[w, w] = self.self_probs[w]
            mat[w, self.adjacency[w]] = self.neighbor_share[w]
        return mat


def build_transition_model(
    grid: Grid,
    adjacency: list[np.ndarray],
    self_transition: float = DEFAULT_SELF_TRANSITION,
    floor: float = DEFAULT_TRANSITION_FLOOR,
    initial_out_prob: float = DEFAULT_INITIAL_OUT_PROB,
) -> TransitionModel:
    """Motion prior from the neighbor structure.

    States with no neighbors keep all non-floor mass in place (isolated
    pixels cannot hand probability to anyone).
    """
    n = grid.n_pixels + 1
    if len(adjacency) != n:
        raise InputError("adjacency length must be P+1")
    self_probs = np.full(n, self_transition)
    share = np.zeros(n)
    for w in range(n):
        n_neigh = len(adjacency[w])
        n_non = n - 1 - n_neigh
        if n_neigh == 0:
            self_probs[w] = 1.0 - n_non * floor
        else:
            share[w] = (1.0 - self_transition - n_non * floor) / n_neigh
    pi = np.full(n, (1.0 - initial_out_prob) / grid.n_pixels)
    pi[-1] = initial_out_prob
    return TransitionModel(
        pi=pi,
        self_probs=self_probs,
        floor=floor,
        adjacency=adjacency,
        neighbor_share=share,
    )


def _probs(likelihoods) -> np.ndarray:
    if isinstance(likelihoods, LikelihoodMap):
        return likelihoods.probabilities
    return np.asarray(likelihoods, dtype=float)


def mll_estimate(likelihoods) -> int:
    """Argmax pixel of the likelihood map; ties go to the lowest index.

    Index P (the last) means the area is read as vacant.
    """
    return int(np.argmax(_probs(likelihoods)))


@dataclass
class ForwardState:
    """Scaled forward vector: max entry 1, with the log scale kept aside."""

    alpha: np.ndarray
    log_scale: float
    frames: int

    @classmethod
    def initial(cls, pi: np.ndarray, likelihoods) -> "ForwardState":
        raw = pi * _probs(likelihoods)
        return cls._scaled(raw, 0.0, 1)

    @classmethod
    def _scaled(cls, raw: np.ndarray, log_scale: float, frames: int) -> "ForwardState":
        m = float(raw.max())
        if not (m > 0 and math.isfinite(m)):
            raise InvariantError("forward vector collapsed to zero")
        return cls(alpha=raw / m, log_scale=log_scale + math.log(m), frames=frames)


def hmml_step(
    state: ForwardState, likelihoods, transition: TransitionModel
) -> tuple[ForwardState, int]:
    """One forward-filter update; returns the new state and the argmax pixel."""
    raw = transition.propagate(state.alpha) * _probs(likelihoods)
    new_state = ForwardState._scaled(raw, state.log_scale, state.frames + 1)
    return new_state, int(np.argmax(new_state.alpha))


class MllTracker:
    """Stateless per-frame argmax wrapped in the common tracker interface."""

    def __init__(self) -> None:
        self.last_map: LikelihoodMap | None = None

    def step(self, likelihoods: LikelihoodMap) -> int:
        self.last_map = likelihoods
        return mll_estimate(likelihoods)


class HmmlTracker:
    """Forward filter over the transition model; initializes on first frame."""

    def __init__(self, transition: TransitionModel) -> None:
        self.transition = transition
        self.state: ForwardState | None = None

    def step(self, likelihoods: LikelihoodMap) -> int:
        if self.state is None:
            self.state = ForwardState.initial(self.transition.pi, likelihoods)
            return int(np.argmax(self.state.alpha))
        self.state, estimate = hmml_step(self.state, likelihoods, self.transition)
        return estimate


# ---------------------------------------------------------------------------
# Regularized least-squares imaging core
# ---------------------------------------------------------------------------


@dataclass
class ImagingModel:
    """Elliptical weight matrix plus the precomputed regularized inverse.

    ``solve_matrix`` maps a per-link score vector straight to the image.
    The vacancy gate parameters travel with the model so every imaging
    localizer shares one definition of "nothing to see".
    """

    weights: np.ndarray  # (L, P)
    solve_matrix: np.ndarray  # (P, L)
    grid: Grid
    ellipse_width: float
    regularization: float
    vacancy_fraction: float = DEFAULT_VACANCY_FRACTION
    min_peak: float = 0.0
    vacancy_smoothing: int = DEFAULT_VACANCY_SMOOTHING


def build_imaging_model(
    links: list[LinkGeometry],
    grid: Grid,
    deltas: np.ndarray | None = None,
    ellipse_width: float = DEFAULT_ELLIPSE_WIDTH_M,
    regularization: float = DEFAULT_REGULARIZATION,
    ridge: float = DEFAULT_RIDGE,
    vacancy_fraction: float = DEFAULT_VACANCY_FRACTION,
    min_peak: float = 0.0,
    vacancy_smoothing: int = DEFAULT_VACANCY_SMOOTHING,
) -> ImagingModel:
    """Weight matrix: 1/sqrt(link length) for pixels within the ellipse
    (excess path length <= ellipse_width), zero outside. The regularizer is
    the lattice first-difference operator plus a light diagonal ridge,
    scaled by the mean diagonal of W'W so one ``regularization`` setting
    behaves the same across link densities."""
    if deltas is None:
        deltas = delta_table(grid, links)
    lengths = np.array([link.length for link in links])
    weights = np.where(deltas <= ellipse_width, 1.0 / np.sqrt(lengths)[:, None], 0.0)

    n_pix = grid.n_pixels
    reg = np.zeros((n_pix, n_pix))
    pairs = lattice_difference_pairs(grid)
    for k, w in pairs:
        reg[k, k] += 1.0
        reg[w, w] += 1.0
        reg[k, w] -= 1.0
        reg[w, k] -= 1.0
    reg += ridge**2 * np.eye(n_pix)

    gram = weights.T @ weights
    scale = float(np.trace(gram)) / n_pix
    if scale <= 0:
        scale = 1.0
    normal = gram + regularization * scale * reg
    try:
        solve_matrix = np.linalg.solve(normal, weights.T)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("imaging normal matrix singular; increase regularization") from exc
    return ImagingModel(
        weights=weights,
        solve_matrix=solve_matrix,
        grid=grid,
        ellipse_width=ellipse_width,
        regularization=regularization,
        vacancy_fraction=vacancy_fraction,
        min_peak=min_peak,
        vacancy_smoothing=vacancy_smoothing,
    )


def solve_rti_image(y: np.ndarray, model: ImagingModel) -> np.ndarray:
    """Linear image reconstruction from per-link scores."""
    y = np.asarray(y, dtype=float)
    if y.shape != (model.weights.shape[0],):
        raise InputError("score vector length does not match the link count")
    return model.solve_matrix @ y


class _VacancyGate:
    """Image-peak vacancy test against a running maximum of past peaks.

    Peaks are exponentially smoothed before the comparison: the raw peak of
    a short-window score image fluctuates far more than the underlying
    occupancy, and a momentary dip must not read as an empty area.
    """

    def __init__(
        self,
        fraction: float,
        min_peak: float = 0.0,
        atol: float = 1e-12,
        smoothing: int = DEFAULT_VACANCY_SMOOTHING,
    ):
        self.fraction = fraction
        self.min_peak = min_peak
        self.atol = atol
        self.alpha = 1.0 / max(smoothing, 1)
        self.smoothed: float | None = None
        self.running_max = 0.0

    def is_vacant(self, peak: float) -> bool:
        if self.smoothed is None:
            self.smoothed = peak
        else:
            self.smoothed = (1.0 - self.alpha) * self.smoothed + self.alpha * peak
        self.running_max = max(self.running_max, self.smoothed)
        if self.smoothed <= self.atol or self.smoothed < self.min_peak:
            return True
        return self.smoothed < self.fraction * self.running_max


class RtiLocalizer:
    """Imaging from absolute RSS deviation against empty-area means.

    Requires a per-link calibration of mean RSS measured while the area was
    known to be vacant; missing samples contribute zero deviation.
    """

    def __init__(self, model: ImagingModel, empty_means: np.ndarray):
        empty_means = np.asarray(empty_means, dtype=float)
        if empty_means.shape != (model.weights.shape[0],):
            raise InputError("empty-area means length does not match the link count")
        if np.isnan(empty_means).any():
            raise InputError("empty-area means contain missing entries")
        self.model = model
        self.empty_means = empty_means
        self._gate = _VacancyGate(
            model.vacancy_fraction, model.min_peak, smoothing=model.vacancy_smoothing
        )

    def step(self, values: np.ndarray) -> int:
        y = np.abs(values - self.empty_means)
        y[np.isnan(values)] = 0.0
        image = solve_rti_image(y, self.model)
        peak = float(image.max())
        if self._gate.is_vacant(peak):
            return self.model.grid.sentinel
        return int(np.argmax(image))


class KrtiLocalizer:
    """Imaging from the kernel distance between long- and short-term
    per-link RSS histograms; needs no calibration but loses stationary
    targets as the two histograms converge."""

    def __init__(
        self,
        model: ImagingModel,
        alphabet: Alphabet,
        short_window: int = DEFAULT_KRTI_SHORT_WINDOW,
        long_window: int = DEFAULT_KRTI_LONG_WINDOW,
        kernel_bw: float = DEFAULT_KRTI_KERNEL_BW,
    ):
        if not 0 < short_window < long_window:
            raise ConfigError("need 0 < short_window < long_window")
        n_links = model.weights.shape[0]
        self.model = model
        self.alphabet = alphabet
        self.alpha_short = 1.0 / short_window
        self.alpha_long = 1.0 / long_window
        # Both histograms drift from their pinned start at different speeds,
        # so scores spike while they season; gate and estimates stay out of
        # it until the slow window has settled (three time constants).
        self.warmup = 3 * long_window
        values = alphabet.values.astype(float)
        self.kernel = np.exp(-0.5 * ((values[:, None] - values[None, :]) / kernel_bw) ** 2)
        self.hist_short = np.zeros((n_links, alphabet.n_values))
        self.hist_long = np.zeros((n_links, alphabet.n_values))
        self._seen = np.zeros(n_links, dtype=bool)
        self._frames = 0
        self._gate = _VacancyGate(
            model.vacancy_fraction, model.min_peak, smoothing=model.vacancy_smoothing
        )

    def _update_histograms(self, values: np.ndarray) -> None:
        present = ~np.isnan(values)
        if not present.any():
            return
        rows = np.nonzero(present)[0]
        idx = np.round(values[rows]).astype(int) - self.alphabet.lo
        seen = self._seen[rows]
        fresh_rows, fresh_idx = rows[~seen], idx[~seen]
        if fresh_rows.size:  # first observation pins the histogram, no decay yet
            self.hist_short[fresh_rows, fresh_idx] = 1.0
            self.hist_long[fresh_rows, fresh_idx] = 1.0
            self._seen[fresh_rows] = True
        old_rows, old_idx = rows[seen], idx[seen]
        if old_rows.size:
            self.hist_short[old_rows] *= 1.0 - self.alpha_short
            self.hist_short[old_rows, old_idx] += self.alpha_short
            self.hist_long[old_rows] *= 1.0 - self.alpha_long
            self.hist_long[old_rows, old_idx] += self.alpha_long

    def scores(self) -> np.ndarray:
        """Per-link kernel distance between the two histograms."""
        d = self.hist_short - self.hist_long
        quad = np.einsum("lr,lr->l", d @ self.kernel, d)
        return np.sqrt(np.maximum(quad, 0.0))

    def step(self, values: np.ndarray) -> int:
        self._update_histograms(values)
        self._frames += 1
        if self._frames < self.warmup:
            return self.model.grid.sentinel
        image = solve_rti_image(self.scores(), self.model)
        peak = float(image.max())
        if self._gate.is_vacant(peak):
            return self.model.grid.sentinel
        return int(np.argmax(image))


@dataclass
class VrtiResult:
    pixel: int  # grid.sentinel when no motion is imaged
    coordinate: np.ndarray | None
    delta_vrti: np.ndarray  # (L,); +inf everywhere on vacancy


class VrtiLocalizer:
    """Imaging from short-window per-link sample variance.

    Localizes motion only; a vacant reading opens the recalibration gate
    completely (excess path lengths reported as +inf).
    """

    def __init__(
        self,
        model: ImagingModel,
        links: list[LinkGeometry],
        window: int = DEFAULT_VRTI_WINDOW,
    ):
        if window < 2:
            raise ConfigError("variance window must hold at least 2 frames")
        self.model = model
        self.window: deque[np.ndarray] = deque(maxlen=window)
        self._links = LinkArrays.from_links(links)
        self._gate = _VacancyGate(
            model.vacancy_fraction, model.min_peak, smoothing=model.vacancy_smoothing
        )

    def step(self, values: np.ndarray) -> VrtiResult:
        self.window.append(np.asarray(values, dtype=float))
        n_links = self._links.length.shape[0]
        stack = np.stack(self.window)
        counts = (~np.isnan(stack)).sum(axis=0)
        y = np.zeros(n_links)
        enough = counts >= 2
        if len(self.window) >= 2 and enough.any():
            means = np.nanmean(stack[:, enough], axis=0)
            dev = stack[:, enough] - means
            y[enough] = np.nansum(dev**2, axis=0) / (counts[enough] - 1)
        image = solve_rti_image(y, self.model)
        peak = float(image.max())
        if self._gate.is_vacant(peak):
            return VrtiResult(
                pixel=self.model.grid.sentinel,
                coordinate=None,
                delta_vrti=np.full(n_links, np.inf),
            )
        pixel = int(np.argmax(image))
        coord = self.model.grid.coordinates[pixel]
        return VrtiResult(pixel=pixel, coordinate=coord, delta_vrti=self._links.point_deltas(coord))


# ---------------------------------------------------------------------------
# Fingerprint discriminant classifier
# ---------------------------------------------------------------------------


@dataclass
class FingerprintModel:
    """Class means plus a shrunk pooled covariance and its discriminant tables.

    ``coordinates[k]`` is the fingerprint location, or None for the
    out-of-area class.
    """

    class_means: np.ndarray  # (K, L)
    coordinates: list[np.ndarray | None]
    covariance: np.ndarray  # (L, L)
    shrinkage: float
    ridge_scale: float
    n_frames: int
    grand_mean: np.ndarray
    _score_weights: np.ndarray = field(init=False, repr=False)  # (L, K)
    _score_bias: np.ndarray = field(init=False, repr=False)  # (K,)

    def __post_init__(self) -> None:
        try:
            weights = np.linalg.solve(self.covariance, self.class_means.T)
        except np.linalg.LinAlgError as exc:
            raise InsufficientDataError(
                "fingerprint covariance is singular; increase shrinkage"
            ) from exc
        self._score_weights = weights
        self._score_bias = -0.5 * np.einsum("kl,lk->k", self.class_means, weights)

    def scores(self, values: np.ndarray) -> np.ndarray:
        return values @ self._score_weights + self._score_bias


def lda_train(
    classes: list[tuple[np.ndarray | None, np.ndarray]],
    shrinkage: float = 0.1,
    ridge_mode: str | float = "trace",
) -> FingerprintModel:
    """Fit class means and a shrinkage-regularized pooled covariance.

    ``classes`` holds (coordinate-or-None, frames) pairs where frames is a
    (T_k, L) array; NaN entries are imputed with the class mean. The pooled
    scatter uses divisor T - (K - 1) over K classes. The ridge scale is
    trace(pooled)/L unless a numeric override is given.

    Args:
        shrinkage: convex weight on the ridge target, in [0, 1].
    """
    if not classes:
        raise InsufficientDataError("no fingerprint classes")
    if not 0.0 <= shrinkage <= 1.0:
        raise InputError("shrinkage must lie in [0, 1]")
    n_links = classes[0][1].shape[1]
    means, coords, imputed = [], [], []
    total = 0
    for coord, frames in classes:
        frames = np.asarray(frames, dtype=float)
        if frames.ndim != 2 or frames.shape[1] != n_links:
            raise InputError("fingerprint frames must share one link count")
        if frames.shape[0] < 2:
            raise InsufficientDataError("every fingerprint class needs at least 2 frames")
        mean = np.nanmean(frames, axis=0)
        if np.isnan(mean).any():
            raise InsufficientDataError("a fingerprint class has an all-missing link")
        filled = np.where(np.isnan(frames), mean, frames)
        means.append(mean)
        coords.append(None if coord is None else np.asarray(coord, dtype=float))
        imputed.append(filled)
        total += frames.shape[0]

    k = len(classes)
    divisor = total - (k - 1)
    if divisor <= 0:
        raise InsufficientDataError("not enough fingerprint frames for the pooled scatter")
    scatter = np.zeros((n_links, n_links))
    for mean, filled in zip(means, imputed):
        dev = filled - mean
        scatter += dev.T @ dev
    pooled = scatter / divisor
    ridge = float(np.trace(pooled)) / n_links if ridge_mode == "trace" else float(ridge_mode)
    covariance = (1.0 - shrinkage) * pooled + shrinkage * ridge * np.eye(n_links)

    class_means = np.stack(means)
    return FingerprintModel(
        class_means=class_means,
        coordinates=coords,
        covariance=covariance,
        shrinkage=shrinkage,
        ridge_scale=ridge,
        n_frames=total,
        grand_mean=class_means.mean(axis=0),
    )


def lda_classify(values: np.ndarray, model: FingerprintModel) -> int:
    """Argmax linear discriminant score; missing entries take the grand mean."""
    values = np.asarray(values, dtype=float)
    filled = np.where(np.isnan(values), model.grand_mean, values)
    return int(np.argmax(model.scores(filled)))


class LdaLocalizer:
    """Fingerprint classifier wrapped in the common tracker interface."""

    def __init__(self, model: FingerprintModel):
        self.model = model

    def step(self, values: np.ndarray) -> int:
        return lda_classify(values, self.model)
