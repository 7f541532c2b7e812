import numpy as np
import pytest

from dfloc.config import SiteConfig, SiteRuntime
from dfloc.errors import NotCalibratedError
from dfloc.evaluation import (
    EstimateSeries,
    detection_rates,
    empty_area_means,
    error_series,
    fingerprint_classes,
    localization_error,
    median_error,
    run_experiment,
)
from dfloc.simulator import generate_trajectory, resolve_link_truth, synthesize_trace


class TestLocalizationError:
    def test_exact_match(self):
        assert localization_error(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0

    def test_345_triangle(self):
        assert localization_error(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == 5.0

    def test_correct_rejection_excluded(self):
        assert localization_error(None, None) is None

    def test_mismatched_presence_excluded(self):
        assert localization_error(None, np.array([1.0, 1.0])) is None
        assert localization_error(np.array([1.0, 1.0]), None) is None


class TestMedianError:
    def test_odd_count(self):
        assert median_error([1.0, 2.0, 9.0]) == 2.0

    def test_even_count_averages_middle(self):
        assert median_error([1.0, 3.0]) == 2.0

    def test_empty_is_undefined(self):
        assert median_error([]) is None

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        errs = rng.random(11)
        assert median_error(errs) == median_error(rng.permutation(errs))


class TestDetectionRates:
    def series(self, coords, times=None):
        times = np.arange(len(coords), dtype=float) if times is None else times
        return EstimateSeries("m", times, coords)

    def test_always_vacant_inside_truth(self):
        truth = np.tile([1.0, 1.0], (5, 1))
        md, fa = detection_rates(self.series([None] * 5), truth)
        assert md == 100.0
        assert fa is None

    def test_always_present_vacant_truth(self):
        truth = np.full((5, 2), np.nan)
        md, fa = detection_rates(self.series([np.zeros(2)] * 5), truth)
        assert md is None
        assert fa == 100.0

    def test_md_plus_detection_is_total(self):
        rng = np.random.default_rng(1)
        truth = np.tile([1.0, 1.0], (20, 1))
        truth[rng.random(20) < 0.3] = np.nan
        coords = [None if rng.random() < 0.4 else np.zeros(2) for _ in range(20)]
        md, _ = detection_rates(self.series(coords), truth)
        inside = ~np.isnan(truth).any(axis=1)
        detected = sum(
            c is not None for c, i in zip(coords, inside) if i
        ) / inside.sum() * 100.0
        assert md + detected == pytest.approx(100.0)

    def test_error_series_excludes_mismatches(self):
        truth = np.array([[1.0, 1.0], [np.nan, np.nan], [2.0, 2.0]])
        coords = [np.array([1.0, 2.0]), np.array([0.0, 0.0]), None]
        errs = error_series(self.series(coords), truth)
        assert errs.shape == (1,)
        assert errs[0] == pytest.approx(1.0)


def tiny_runtime():
    return SiteRuntime(
        SiteConfig(
            nodes={
                0: (0.0, 0.0),
                1: (2.5, 0.0),
                2: (5.0, 0.0),
                3: (5.0, 4.0),
                4: (2.5, 4.0),
                5: (0.0, 4.0),
            },
            channels=[11, 14],
            grid_bounds=(0.0, 0.0, 5.0, 4.0),
            grid_spacing=1.0,
            entrances=[(0.0, 0.0)],
        )
    )


def make_traces(runtime, seed=70):
    truth = resolve_link_truth(
        {"mu_u": [-65, -55], "sigma2_u": 2.2, "beta": 0.7, "lambda_m": 0.5},
        runtime.links,
        seed=seed,
    )
    train_traj = generate_trajectory(
        runtime.grid,
        runtime.walls,
        {"random_walk": {"n_waypoints": 60}, "speed_mps": 1.0, "loop": True, "prologue_s": 60.0},
        frame_period=0.5,
        duration_s=300.0,
        seed=seed,
    )
    train = synthesize_trace(
        runtime.links, truth, train_traj, [], 0.01, seed=seed, alphabet=runtime.alphabet
    )
    test_traj = generate_trajectory(
        runtime.grid,
        runtime.walls,
        {
            "waypoints": [[1.0, 1.0], [4.0, 2.0], [2.0, 3.0]],
            "dwell_s": 10.0,
            "speed_mps": 1.0,
            "prologue_s": 30.0,
            "loop": True,
        },
        frame_period=0.5,
        duration_s=240.0,
        seed=seed + 1,
    )
    test = synthesize_trace(
        runtime.links, truth, test_traj, [], 0.01, seed=seed + 1, alphabet=runtime.alphabet
    )
    return train, test


class TestCalibrationInputs:
    def test_empty_area_means_leading_segment(self):
        runtime = tiny_runtime()
        train, _ = make_traces(runtime)
        means = empty_area_means(train)
        lead = np.nanmean(train.values[: int(np.argmax(train.trajectory.in_area()))], axis=0)
        np.testing.assert_allclose(means, lead)
        assert means.shape == (len(runtime.links),)

    def test_no_vacant_start_rejected(self):
        runtime = tiny_runtime()
        # build a trace whose first frame is already inside
        truth = resolve_link_truth({"mu_u": -60.0}, runtime.links, seed=3)
        traj = generate_trajectory(
            runtime.grid,
            runtime.walls,
            {"waypoints": [[2.0, 2.0]], "dwell_s": 30.0},
            frame_period=0.5,
            duration_s=30.0,
        )
        trace = synthesize_trace(
            runtime.links, truth, traj, [], 0.0, seed=3, alphabet=runtime.alphabet
        )
        with pytest.raises(NotCalibratedError):
            empty_area_means(trace)

    def test_fingerprint_classes_include_out(self):
        runtime = tiny_runtime()
        _, test = make_traces(runtime)
        classes = fingerprint_classes(test, runtime)
        coords = [c for c, _ in classes]
        assert any(c is None for c in coords)
        assert sum(c is not None for c in coords) >= 3
        for _, frames in classes:
            assert frames.shape[0] >= 5


class TestRunExperiment:
    def test_all_methods_produce_rows(self):
        runtime = tiny_runtime()
        train, test = make_traces(runtime)
        report, series = run_experiment(
            runtime, ["mll", "hmml", "rti", "krti", "vrti", "lda"], test, train
        )
        assert [m.method for m in report.methods] == [
            "mll",
            "hmml",
            "rti",
            "krti",
            "vrti",
            "lda",
        ]
        for m in report.methods:
            assert m.error is None
            assert m.frames == test.n_frames
        assert set(series) == {"mll", "hmml", "rti", "krti", "vrti", "lda"}

    def test_missing_calibration_recorded_not_raised(self):
        runtime = tiny_runtime()
        _, test = make_traces(runtime)
        report, series = run_experiment(runtime, ["rti", "krti"], test, training=None)
        rti_row = report.methods[0]
        assert rti_row.error is not None
        assert rti_row.median_error_m is None
        assert report.methods[1].error is None
        assert set(series) == {"krti"}

    def test_deterministic_reports(self):
        runtime = tiny_runtime()
        train, test = make_traces(runtime)
        r1, _ = run_experiment(runtime, ["mll", "krti"], test, train)
        r2, _ = run_experiment(runtime, ["mll", "krti"], test, train)
        for a, b in zip(r1.methods, r2.methods):
            assert a.median_error_m == b.median_error_m
            assert a.missed_detection_pct == b.missed_detection_pct
            assert a.false_alarm_pct == b.false_alarm_pct
            assert np.array_equal(a.errors, b.errors)

    def test_mpl_accuracy_on_tiny_site(self):
        runtime = tiny_runtime()
        train, test = make_traces(runtime)
        report, _ = run_experiment(runtime, ["mll", "hmml"], test, train)
        for m in report.methods:
            assert m.median_error_m <= 2 * runtime.grid.spacing
            assert m.missed_detection_pct <= 5.0
