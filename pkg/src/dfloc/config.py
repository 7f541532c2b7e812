"""Site and scenario configuration: node layout, walls, grid, and every
tunable constant in one declarative, JSON-serializable place.

A model file records the hash of the site config it was trained against,
so mismatched deployments fail fast at load time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import (
    Grid,
    LinkGeometry,
    NodeLayout,
    WallSet,
    build_grid,
    delta_table,
    make_links,
)
from .rssmodel import Alphabet


@dataclass
class Tunables:
    """Every knob the engine exposes, with its default value.

    The defaults are the values the system is designed around; ranges are
    enforced by validate().
    """

    mean_shift_dbm: float = 3.0  # affected mean sits this far below unaffected
    variance_scale: float = 2.5  # affected variance inflation factor
    min_sigma_dbm: float = 0.75  # sigma floor against RSS quantization
    pmf_floor: float = 1e-5
    buffer_len: int = 15
    recal_threshold_dbm: float = 1.0
    neighbor_max_step_m: float = 0.75
    max_speed_mps: float = 3.0
    self_transition: float = 0.9
    transition_floor: float = 1e-200
    initial_out_prob: float = 0.95
    sentinel_affected_prob: float = 1e-3
    mixture_weight_candidates: int = 100
    epl_bin_width_m: float = 0.1
    epl_bin_min_count: int = 20
    ellipse_width_m: float = 0.05
    rti_regularization: float = 1.3
    rti_ridge: float = 0.1
    vacancy_fraction: float = 0.5
    vacancy_min_peak: float = 0.0
    vacancy_smoothing: int = 8
    krti_short_window: int = 6
    krti_long_window: int = 30
    krti_kernel_bw_dbm: float = 4.0
    vrti_window: int = 10
    fallback_beta: float = 0.6
    fallback_lambda_m: float = 0.3
    lda_shrinkage: float = 0.1

    def validate(self) -> None:
        checks = [
            (self.mean_shift_dbm >= 0, "mean_shift_dbm must be >= 0"),
            (self.variance_scale > 0, "variance_scale must be > 0"),
            (self.min_sigma_dbm > 0, "min_sigma_dbm must be > 0"),
            (0 < self.pmf_floor < 1, "pmf_floor must lie in (0, 1)"),
            (self.buffer_len >= 2, "buffer_len must be >= 2"),
            (self.recal_threshold_dbm >= 0, "recal_threshold_dbm must be >= 0"),
            (self.neighbor_max_step_m > 0, "neighbor_max_step_m must be > 0"),
            (self.max_speed_mps > 0, "max_speed_mps must be > 0"),
            (0 < self.self_transition < 1, "self_transition must lie in (0, 1)"),
            (0 < self.transition_floor < 1e-6, "transition_floor must be tiny and positive"),
            (0 < self.initial_out_prob < 1, "initial_out_prob must lie in (0, 1)"),
            (0 < self.sentinel_affected_prob < 1, "sentinel_affected_prob must lie in (0, 1)"),
            (self.mixture_weight_candidates >= 2, "mixture_weight_candidates must be >= 2"),
            (self.epl_bin_width_m > 0, "epl_bin_width_m must be > 0"),
            (self.epl_bin_min_count >= 1, "epl_bin_min_count must be >= 1"),
            (self.ellipse_width_m > 0, "ellipse_width_m must be > 0"),
            (self.rti_regularization > 0, "rti_regularization must be > 0"),
            (self.rti_ridge > 0, "rti_ridge must be > 0"),
            (0 < self.vacancy_fraction < 1, "vacancy_fraction must lie in (0, 1)"),
            (self.vacancy_min_peak >= 0, "vacancy_min_peak must be >= 0"),
            (self.vacancy_smoothing >= 1, "vacancy_smoothing must be >= 1"),
            (0 < self.krti_short_window < self.krti_long_window, "krti windows misordered"),
            (self.krti_kernel_bw_dbm > 0, "krti_kernel_bw_dbm must be > 0"),
            (self.vrti_window >= 2, "vrti_window must be >= 2"),
            (0 < self.fallback_beta < 1, "fallback_beta must lie in (0, 1)"),
            (self.fallback_lambda_m > 0, "fallback_lambda_m must be > 0"),
            (0 <= self.lda_shrinkage <= 1, "lda_shrinkage must lie in [0, 1]"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


@dataclass
class SiteConfig:
    """Physical deployment description plus all engine tunables."""

    nodes: dict[int, tuple[float, float]]
    channels: list[int]
    grid_bounds: tuple[float, float, float, float]
    grid_spacing: float = 0.6
    walls: list = field(default_factory=list)  # [[x1, y1], [x2, y2]] pairs
    entrances: list = field(default_factory=list)  # [x, y] coordinates
    alphabet_lo: int = -110
    alphabet_hi: int = -10
    tunables: Tunables = field(default_factory=Tunables)

    def __post_init__(self) -> None:
        if len(self.nodes) < 2:
            raise ConfigError("a site needs at least two nodes")
        if not self.channels:
            raise ConfigError("a site needs at least one channel")
        if len(set(self.channels)) != len(self.channels):
            raise ConfigError("channel list contains duplicates")
        self.tunables.validate()

    # -- constructors for the geometry/model objects ------------------------

    def layout(self) -> NodeLayout:
        return NodeLayout({int(i): np.asarray(c, dtype=float) for i, c in self.nodes.items()})

    def wall_set(self) -> WallSet:
        if not self.walls:
            return WallSet.empty()
        return WallSet(np.asarray(self.walls, dtype=float))

    def build_grid(self) -> Grid:
        return build_grid(
            self.grid_bounds,
            self.grid_spacing,
            self.wall_set(),
            [np.asarray(e, dtype=float) for e in self.entrances],
        )

    def links(self) -> list[LinkGeometry]:
        return make_links(self.layout(), self.channels)

    def alphabet(self) -> Alphabet:
        return Alphabet(self.alphabet_lo, self.alphabet_hi)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        data = asdict(self)
        data["nodes"] = {str(i): list(map(float, c)) for i, c in self.nodes.items()}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SiteConfig":
        try:
            nodes = {int(i): tuple(map(float, c)) for i, c in data["nodes"].items()}
            tunables = Tunables(**data.get("tunables", {}))
            return cls(
                nodes=nodes,
                channels=[int(c) for c in data["channels"]],
                grid_bounds=tuple(map(float, data["grid_bounds"])),
                grid_spacing=float(data.get("grid_spacing", 0.6)),
                walls=data.get("walls", []),
                entrances=data.get("entrances", []),
                alphabet_lo=int(data.get("alphabet_lo", -110)),
                alphabet_hi=int(data.get("alphabet_hi", -10)),
                tunables=tunables,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed site config: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SiteConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


class SiteRuntime:
    """Materialized geometry for one site config, built once and shared.

    Everything here is immutable; localizer instances over it may run
    concurrently.
    """

    def __init__(self, config: SiteConfig):
        self.config = config
        self.tunables = config.tunables
        self.layout = config.layout()
        self.links = config.links()
        self.grid = config.build_grid()
        self.walls = config.wall_set()
        self.alphabet = config.alphabet()

    @cached_property
    def deltas(self) -> np.ndarray:
        """Excess path length table, (L, P)."""
        return delta_table(self.grid, self.links)

    @cached_property
    def delta_max(self) -> np.ndarray:
        """Per-link maximum excess path length over the in-area pixels."""
        return self.deltas.max(axis=1)


@dataclass
class ScenarioConfig:
    """Declarative synthetic-experiment description for the simulator.

    ``trajectory`` is either {"waypoints": [[x, y], ...], ...} or
    {"random_walk": {"n_waypoints": int}, ...}; shared keys are speed_mps,
    dwell_s (scalar or per-waypoint list), prologue_s, epilogue_s.
    ``link_truth`` gives generating parameters; each of mu_u, sigma2_u,
    beta, lambda_m may be a scalar or a [lo, hi] range randomized per link
    from the scenario seed. ``events`` entries hold time_s, shift_dbm, and
    either an explicit link list or a node list.
    """

    site: SiteConfig
    trajectory: dict
    link_truth: dict
    duration_s: float
    frame_period_s: float = 0.5
    seed: int = 0
    loss_prob: float = 0.01
    events: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.frame_period_s > 0:
            raise ConfigError("frame_period_s must be positive")
        if not 0 <= self.loss_prob <= 1:
            raise ConfigError("loss_prob must lie in [0, 1]")
        if not self.duration_s > 0:
            raise ConfigError("duration_s must be positive")

    def to_dict(self) -> dict:
        return {
            "site": self.site.to_dict(),
            "trajectory": self.trajectory,
            "link_truth": self.link_truth,
            "duration_s": self.duration_s,
            "frame_period_s": self.frame_period_s,
            "seed": self.seed,
            "loss_prob": self.loss_prob,
            "events": self.events,
        }

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "ScenarioConfig":
        try:
            if "site_file" in data:
                site_path = Path(data["site_file"])
                if base_dir is not None and not site_path.is_absolute():
                    site_path = base_dir / site_path
                site = SiteConfig.load(site_path)
            else:
                site = SiteConfig.from_dict(data["site"])
            return cls(
                site=site,
                trajectory=data["trajectory"],
                link_truth=data["link_truth"],
                duration_s=float(data["duration_s"]),
                frame_period_s=float(data.get("frame_period_s", 0.5)),
                seed=int(data.get("seed", 0)),
                loss_prob=float(data.get("loss_prob", 0.01)),
                events=data.get("events", []),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed scenario config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
