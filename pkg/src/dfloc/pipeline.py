"""Runtime loop binding the mixture localizers to their companions: the
variance imager feeds the recalibration gate every frame, and committed
parameter updates refresh the likelihood engine before the next frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import ContinuousRecalibrator, TrainingResult
from .config import SiteRuntime
from .errors import InputError
from .localizers import (
    HmmlTracker,
    MllTracker,
    VrtiLocalizer,
    build_imaging_model,
    build_transition_model,
)
from .geometry import neighbors
from .rssmodel import LikelihoodEngine, LinkModel, LinkStateParams, RssFrame, SpatialParams


@dataclass
class TrainedModel:
    """Per-link trained parameters, the in-memory form of a model file."""

    state_params: list[LinkStateParams]
    spatial_params: list[SpatialParams]
    spatial_fallback: np.ndarray

    @classmethod
    def from_training(cls, result: TrainingResult) -> "TrainedModel":
        return cls(
            state_params=result.state_params,
            spatial_params=result.spatial_params,
            spatial_fallback=result.spatial_fallback,
        )


class MplPipeline:
    """One mixture localizer (per-frame argmax or forward filter) plus the
    variance companion and continuous recalibration, stepped in lockstep.

    Estimates use the parameters committed before the frame arrives; this
    frame's gate decisions update the model for the next frame.
    """

    def __init__(
        self,
        runtime: SiteRuntime,
        model: TrainedModel,
        method: str = "mll",
        no_walls: bool = False,
    ):
        if method not in ("mll", "hmml"):
            raise InputError(f"unknown mixture method {method!r}")
        if len(model.state_params) != len(runtime.links):
            raise InputError("trained model link count does not match the site")
        tun = runtime.tunables
        self.runtime = runtime
        self.method = method

        link_models = [
            LinkModel.build(
                sp.mu_u,
                sp.sigma2_u,
                spatial,
                runtime.alphabet,
                mean_shift=tun.mean_shift_dbm,
                variance_scale=tun.variance_scale,
                floor=tun.pmf_floor,
                min_sigma=tun.min_sigma_dbm,
            )
            for sp, spatial in zip(model.state_params, model.spatial_params)
        ]
        self.engine = LikelihoodEngine(
            runtime.links,
            runtime.grid,
            link_models,
            runtime.alphabet,
            sentinel_prob=tun.sentinel_affected_prob,
            deltas=runtime.deltas,
        )

        if method == "hmml":
            adjacency = neighbors(
                runtime.grid, runtime.walls, tun.neighbor_max_step_m, ignore_walls=no_walls
            )
            transition = build_transition_model(
                runtime.grid,
                adjacency,
                self_transition=tun.self_transition,
                floor=tun.transition_floor,
                initial_out_prob=tun.initial_out_prob,
            )
            self.tracker = HmmlTracker(transition)
        else:
            self.tracker = MllTracker()

        imaging = build_imaging_model(
            runtime.links,
            runtime.grid,
            deltas=runtime.deltas,
            ellipse_width=tun.ellipse_width_m,
            regularization=tun.rti_regularization,
            ridge=tun.rti_ridge,
            vacancy_fraction=tun.vacancy_fraction,
            min_peak=tun.vacancy_min_peak,
        )
        self.vrti = VrtiLocalizer(imaging, runtime.links, window=tun.vrti_window)
        self.recalibrator = ContinuousRecalibrator(
            initial_mu=np.array([sp.mu_u for sp in model.state_params]),
            delta_max=runtime.delta_max,
            buffer_len=tun.buffer_len,
            threshold_dbm=tun.recal_threshold_dbm,
            min_sigma=tun.min_sigma_dbm,
        )
        self._frame_index = 0

    def step(self, values: np.ndarray, timestamp: float | None = None) -> int:
        """Process one frame; returns the estimated pixel index (P = vacant)."""
        t = self._frame_index if timestamp is None else timestamp
        self._frame_index += 1
        vrti = self.vrti.step(values)
        estimate = self.tracker.step(self.engine.map(RssFrame(t, values)))
        vacant = estimate == self.runtime.grid.sentinel
        tun = self.runtime.tunables
        for l, mu_u, sigma2_u in self.recalibrator.observe(values, vrti.delta_vrti, vacant):
            model = LinkModel.build(
                mu_u,
                sigma2_u,
                self.engine.models[l].spatial,
                self.runtime.alphabet,
                mean_shift=tun.mean_shift_dbm,
                variance_scale=tun.variance_scale,
                floor=tun.pmf_floor,
                min_sigma=tun.min_sigma_dbm,
            )
            self.engine.update_link(l, model)
        return estimate

    def estimate_coordinate(self, pixel: int) -> np.ndarray | None:
        """Pixel index to coordinate; None for the out-of-area reading."""
        if pixel == self.runtime.grid.sentinel:
            return None
        return self.runtime.grid.coordinates[pixel]

    def committed_mu(self) -> np.ndarray:
        """Currently committed per-link unaffected means (test/inspection)."""
        return np.array([m.state.mu_u for m in self.engine.models])
