"""Probability machinery for the per-link RSS mixture model.

Discrete RSS alphabet, affected/unaffected conditional pmfs, spatial
weighting of the affected state, and the log-domain per-pixel likelihood
map that the localizers consume.

Missing measurements (lost packets) are represented as NaN inside frame
vectors and as None in scalar APIs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .geometry import Grid, LinkGeometry, delta_table

DEFAULT_PMF_FLOOR = 1e-5
DEFAULT_MEAN_SHIFT_DBM = 3.0
DEFAULT_VARIANCE_SCALE = 2.5
DEFAULT_MIN_SIGMA_DBM = 0.75
SENTINEL_AFFECTED_PROB = 1e-3


def is_missing(r) -> bool:
    return r is None or (isinstance(r, float) and math.isnan(r))


@dataclass(frozen=True)
class Alphabet:
    """Integer dBm measurement range; the missing event lives alongside it."""

    lo: int = -110
    hi: int = -10

    def __post_init__(self) -> None:
        if self.hi <= self.lo:
            raise InputError("alphabet hi must exceed lo")

    @property
    def values(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    @property
    def n_values(self) -> int:
        return self.hi - self.lo + 1

    @property
    def n_symbols(self) -> int:
        """Alphabet size including the missing event."""
        return self.n_values + 1

    def index(self, r: float) -> int:
        k = int(round(r))
        if not self.lo <= k <= self.hi:
            raise InputError(f"RSS value {r} outside alphabet [{self.lo}, {self.hi}]")
        return k - self.lo


@dataclass(frozen=True)
class LinkStateParams:
    """Gaussian parameters of the unaffected and affected RSS distributions."""

    mu_u: float
    sigma2_u: float
    mu_a: float
    sigma2_a: float

    def __post_init__(self) -> None:
        if self.sigma2_u <= 0 or self.sigma2_a <= 0:
            raise InputError("state variances must be positive")


@dataclass(frozen=True)
class SpatialParams:
    """Exponential-decay weighting of the affected state vs. excess path length."""

    beta: float
    lam: float  # decay length, meters

    def __post_init__(self) -> None:
        if not 0.0 < self.beta < 1.0:
            raise InputError("beta must lie strictly inside (0, 1)")
        if not self.lam > 0.0:
            raise InputError("lam must be positive")


@dataclass(frozen=True)
class ConditionalPmf:
    """Floored, normalized pmf of RSS given one link state.

    Masses are the Gaussian density evaluated at each integer value, divided
    by their sum, then clamped from below; the missing event always carries
    exactly the floor. The clamp is applied after normalization and the pmf
    is not renormalized, so the total may exceed 1 by at most
    n_symbols * floor, identically for every hypothesis.
    """

    alphabet: Alphabet
    masses: np.ndarray  # (n_values,)
    floor: float

    @property
    def missing_mass(self) -> float:
        return self.floor

    def prob(self, r) -> float:
        if is_missing(r):
            return self.floor
        return float(self.masses[self.alphabet.index(r)])

    def total(self) -> float:
        """Sum over the alphabet including the missing event."""
        return float(self.masses.sum()) + self.floor


def build_conditional_pmf(
    mu: float,
    sigma2: float,
    alphabet: Alphabet,
    floor: float = DEFAULT_PMF_FLOOR,
) -> ConditionalPmf:
    """Quantized Gaussian pmf over the alphabet with a probability floor."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    values = alphabet.values.astype(float)
    dens = np.exp(-0.5 * (values - mu) ** 2 / sigma2)
    total = dens.sum()
    if total <= 0:  # mean far outside the alphabet: all densities underflow
        masses = np.full(alphabet.n_values, floor)
    else:
        masses = np.maximum(dens / total, floor)
    return ConditionalPmf(alphabet=alphabet, masses=masses, floor=floor)


def derive_affected_params(
    mu_u: float,
    sigma2_u: float,
    mean_shift: float = DEFAULT_MEAN_SHIFT_DBM,
    variance_scale: float = DEFAULT_VARIANCE_SCALE,
    min_sigma: float = DEFAULT_MIN_SIGMA_DBM,
) -> tuple[float, float]:
    """Affected-state Gaussian from the unaffected one: shifted down, inflated."""
    if sigma2_u < min_sigma**2:
        raise InputError("sigma2_u below the configured variance floor")
    return mu_u - mean_shift, variance_scale * sigma2_u


def affected_probability(
    spatial: SpatialParams,
    delta: float,
    is_sentinel: bool = False,
    sentinel_prob: float = SENTINEL_AFFECTED_PROB,
) -> float:
    """Probability the link is affected given the person's excess path length.

    The out-of-area hypothesis uses a fixed small constant instead of the
    exponential decay.
    """
    if is_sentinel:
        return sentinel_prob
    if delta < 0:
        raise InputError("excess path length cannot be negative")
    return spatial.beta * math.exp(-delta / spatial.lam)


def mixture_probability(r, pmf_a: ConditionalPmf, pmf_u: ConditionalPmf, p_a: float) -> float:
    """Convex combination of the affected and unaffected pmfs at r."""
    if not 0.0 <= p_a <= 1.0:
        raise InputError("p_a must lie in [0, 1]")
    return p_a * pmf_a.prob(r) + (1.0 - p_a) * pmf_u.prob(r)


@dataclass
class LinkModel:
    """Per-link parameter bundle: state Gaussians, spatial decay, derived pmfs."""

    state: LinkStateParams
    spatial: SpatialParams
    pmf_a: ConditionalPmf
    pmf_u: ConditionalPmf

    @classmethod
    def build(
        cls,
        mu_u: float,
        sigma2_u: float,
        spatial: SpatialParams,
        alphabet: Alphabet,
        mean_shift: float = DEFAULT_MEAN_SHIFT_DBM,
        variance_scale: float = DEFAULT_VARIANCE_SCALE,
        floor: float = DEFAULT_PMF_FLOOR,
        min_sigma: float = DEFAULT_MIN_SIGMA_DBM,
    ) -> "LinkModel":
        mu_a, sigma2_a = derive_affected_params(
            mu_u, sigma2_u, mean_shift, variance_scale, min_sigma
        )
        state = LinkStateParams(mu_u, sigma2_u, mu_a, sigma2_a)
        return cls(
            state=state,
            spatial=spatial,
            pmf_a=build_conditional_pmf(mu_a, sigma2_a, alphabet, floor),
            pmf_u=build_conditional_pmf(mu_u, sigma2_u, alphabet, floor),
        )


@dataclass
class RssFrame:
    """One RSS vector over all links at a single time step; NaN = missing."""

    timestamp: float
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)


@dataclass
class LikelihoodMap:
    """Per-pixel probability of the observed frame, max-normalized to 1."""

    probabilities: np.ndarray  # (P+1,)
    log_likelihoods: np.ndarray  # (P+1,) unnormalized
    psi: float  # max log likelihood subtracted before exponentiation


class LikelihoodEngine:
    """Stacked per-link mixture tables for fast per-frame likelihood maps.

    Holds the excess-path-length table, the affected-probability matrix
    (with the fixed out-of-area column), and the pmf lookup matrices. Link
    models are replaced as whole rows by the recalibration path.
    """

    def __init__(
        self,
        links: list[LinkGeometry],
        grid: Grid,
        models: list[LinkModel],
        alphabet: Alphabet,
        sentinel_prob: float = SENTINEL_AFFECTED_PROB,
        deltas: np.ndarray | None = None,
    ):
        if len(models) != len(links):
            raise InputError("one LinkModel per link required")
        self.links = links
        self.grid = grid
        self.alphabet = alphabet
        self.models = list(models)
        self.deltas = delta_table(grid, links) if deltas is None else deltas
        L = len(links)
        self._pa = np.empty((L, grid.n_pixels + 1))
        self._pa[:, -1] = sentinel_prob
        self._pmf_a = np.empty((L, alphabet.n_values))
        self._pmf_u = np.empty((L, alphabet.n_values))
        self._floor = np.empty(L)
        for l, model in enumerate(models):
            self._refresh_row(l, model)

    def _refresh_row(self, l: int, model: LinkModel) -> None:
        sp = model.spatial
        self._pa[l, :-1] = sp.beta * np.exp(-self.deltas[l] / sp.lam)
        self._pmf_a[l] = model.pmf_a.masses
        self._pmf_u[l] = model.pmf_u.masses
        self._floor[l] = model.pmf_u.floor

    def update_link(self, l: int, model: LinkModel) -> None:
        """Swap in a recalibrated model for link l."""
        self.models[l] = model
        self._refresh_row(l, model)

    def map(self, frame: RssFrame) -> LikelihoodMap:
        """Per-pixel likelihood of the frame under the mixture model.

        Log-domain sum over links, then exp(loglik - max) so the best pixel
        carries probability exactly 1. Missing links contribute the same
        floored mass to every hypothesis.
        """
        vals = frame.values
        if vals.shape != (len(self.links),):
            raise InputError(f"frame has {vals.shape} values, expected {len(self.links)}")
        present = ~np.isnan(vals)
        n_pix = self._pa.shape[1]
        if present.any():
            idx = np.round(vals[present]).astype(int) - self.alphabet.lo
            if idx.min() < 0 or idx.max() >= self.alphabet.n_values:
                raise InputError("frame contains RSS outside the alphabet")
            rows = np.nonzero(present)[0]
            a = self._pmf_a[rows, idx][:, None]
            u = self._pmf_u[rows, idx][:, None]
            pa = self._pa[rows]
            loglik = np.log(pa * a + (1.0 - pa) * u).sum(axis=0)
        else:
            loglik = np.zeros(n_pix)
        if not present.all():
            loglik = loglik + np.log(self._floor[~present]).sum()
        psi = float(loglik.max())
        return LikelihoodMap(
            probabilities=np.exp(loglik - psi),
            log_likelihoods=loglik,
            psi=psi,
        )


def likelihood_map(
    frame: RssFrame,
    link_models: list[LinkModel],
    links: list[LinkGeometry],
    grid: Grid,
    deltas: np.ndarray | None = None,
    sentinel_prob: float = SENTINEL_AFFECTED_PROB,
) -> LikelihoodMap:
    """One-shot likelihood map; builds the lookup tables on the fly.

    Use LikelihoodEngine directly when mapping many frames.
    """
    if not links:
        n_pix = grid.n_pixels + 1
        zeros = np.zeros(n_pix)
        return LikelihoodMap(probabilities=np.ones(n_pix), log_likelihoods=zeros, psi=0.0)
    alphabet = link_models[0].pmf_u.alphabet
    engine = LikelihoodEngine(links, grid, link_models, alphabet, sentinel_prob, deltas)
    return engine.map(frame)
