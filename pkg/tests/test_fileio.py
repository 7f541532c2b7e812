import numpy as np
import pytest

from dfloc import fileio
from dfloc.config import SiteConfig, SiteRuntime
from dfloc.errors import InputError
from dfloc.evaluation import EstimateSeries, EvaluationReport, MethodReport
from dfloc.pipeline import TrainedModel
from dfloc.rssmodel import LinkStateParams, SpatialParams
from dfloc.simulator import generate_trajectory, resolve_link_truth, synthesize_trace


def small_site():
    return SiteConfig(
        nodes={0: (0.0, 0.0), 1: (4.0, 0.0), 2: (4.0, 3.0), 3: (0.0, 3.0)},
        channels=[11, 14],
        grid_bounds=(0.0, 0.0, 4.0, 3.0),
        grid_spacing=1.0,
        entrances=[(0.0, 0.0)],
    )


def small_trace(seed=5, loss=0.2):
    runtime = SiteRuntime(small_site())
    truth = resolve_link_truth({"mu_u": [-65, -55]}, runtime.links, seed=seed)
    traj = generate_trajectory(
        runtime.grid,
        runtime.walls,
        {"waypoints": [[1.0, 1.0], [3.0, 2.0]], "speed_mps": 1.0, "prologue_s": 5.0,
         "dwell_s": 3.0},
        frame_period=0.5,
        duration_s=30.0,
        seed=seed,
    )
    return runtime, synthesize_trace(
        runtime.links, truth, traj, [], loss, seed=seed, alphabet=runtime.alphabet
    )


class TestTraceRoundTrip:
    def test_exact_round_trip(self, tmp_path):
        _, trace = small_trace()
        path = tmp_path / "trace.txt"
        fileio.write_trace(path, trace)
        back = fileio.read_trace(path)
        np.testing.assert_array_equal(back.timestamps, trace.timestamps)
        np.testing.assert_array_equal(back.values, trace.values)  # NaN == NaN via array_equal
        np.testing.assert_array_equal(
            back.trajectory.positions, trace.trajectory.positions
        )
        assert back.frame_period == trace.frame_period
        assert [l.link_id for l in back.links] == [l.link_id for l in trace.links]

    def test_write_is_deterministic(self, tmp_path):
        _, trace = small_trace()
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        fileio.write_trace(a, trace)
        fileio.write_trace(b, trace)
        assert a.read_bytes() == b.read_bytes()

    def test_undeclared_link_rejected(self, tmp_path):
        _, trace = small_trace()
        path = tmp_path / "trace.txt"
        fileio.write_trace(path, trace)
        text = path.read_text().replace("R,0.0,0,1,11,", "R,0.0,0,9,11,", 1)
        path.write_text(text)
        with pytest.raises(InputError):
            fileio.read_trace(path)

    def test_nonmonotonic_timestamps_rejected(self, tmp_path):
        path = tmp_path / "trace.txt"
        path.write_text(
            "V,1\nP,0.5\nN,0,0.0,0.0\nN,1,4.0,0.0\nC,11\n"
            "R,1.0,0,1,11,-60\nR,0.5,0,1,11,-61\n"
        )
        with pytest.raises(InputError):
            fileio.read_trace(path)

    def test_partial_ground_truth_rejected(self, tmp_path):
        path = tmp_path / "trace.txt"
        path.write_text(
            "V,1\nP,0.5\nN,0,0.0,0.0\nN,1,4.0,0.0\nC,11\n"
            "R,0.0,0,1,11,-60\nG,0.0,OUT\nR,0.5,0,1,11,-61\n"
        )
        with pytest.raises(InputError):
            fileio.read_trace(path)

    def test_site_mismatch_detected(self, tmp_path):
        _, trace = small_trace()
        other = small_site()
        other.nodes[1] = (4.5, 0.0)
        with pytest.raises(InputError):
            fileio.check_trace_matches_site(trace, other)


class TestEstimatesRoundTrip:
    def test_round_trip_with_vacant(self, tmp_path):
        series = EstimateSeries(
            method="mll",
            timestamps=np.array([0.0, 0.5, 1.0]),
            coordinates=[np.array([1.25, 2.5]), None, np.array([0.0, 0.1])],
        )
        path = tmp_path / "est.txt"
        fileio.write_estimates(path, series)
        back = fileio.read_estimates(path)
        assert back.method == "mll"
        np.testing.assert_array_equal(back.timestamps, series.timestamps)
        assert back.coordinates[1] is None
        np.testing.assert_array_equal(back.coordinates[0], series.coordinates[0])
        np.testing.assert_array_equal(back.coordinates[2], series.coordinates[2])


class TestModelFile:
    def model(self, site):
        n = len(site.links())
        return TrainedModel(
            state_params=[LinkStateParams(-60.0 - i * 0.25, 2.0, -63.0 - i * 0.25, 5.0) for i in range(n)],
            spatial_params=[SpatialParams(0.5 + 0.01 * i, 0.4) for i in range(n)],
            spatial_fallback=np.zeros(n, dtype=bool),
        )

    def test_round_trip(self, tmp_path):
        site = small_site()
        model = self.model(site)
        path = tmp_path / "model.json"
        fileio.write_model(path, model, site)
        back = fileio.read_model(path, site)
        for a, b in zip(back.state_params, model.state_params):
            assert a.mu_u == b.mu_u and a.sigma2_u == b.sigma2_u
        for a, b in zip(back.spatial_params, model.spatial_params):
            assert a.beta == b.beta and a.lam == b.lam

    def test_config_hash_mismatch_rejected(self, tmp_path):
        site = small_site()
        model = self.model(site)
        path = tmp_path / "model.json"
        fileio.write_model(path, model, site)
        modified = small_site()
        modified.tunables.buffer_len = 20
        with pytest.raises(InputError):
            fileio.read_model(path, modified)


class TestReport:
    def report(self):
        return EvaluationReport(
            methods=[
                MethodReport(
                    method="mll",
                    frames=100,
                    median_error_m=0.42,
                    quantiles={"p25": 0.2, "p75": 0.9, "p90": 1.4},
                    missed_detection_pct=0.0,
                    false_alarm_pct=None,
                    n_error_frames=90,
                    n_truth_inside=90,
                    n_truth_outside=0,
                ),
                MethodReport(method="rti", frames=100, error="not calibrated"),
            ],
            n_frames=100,
            seed=7,
        )

    def test_report_files_deterministic(self, tmp_path):
        report = self.report()
        a, at = tmp_path / "a.txt", tmp_path / "a.csv"
        b, bt = tmp_path / "b.txt", tmp_path / "b.csv"
        fileio.write_report(a, report, at)
        fileio.write_report(b, report, bt)
        assert a.read_bytes() == b.read_bytes()
        assert at.read_bytes() == bt.read_bytes()

    def test_undefined_metrics_written_as_na(self, tmp_path):
        path = tmp_path / "r.txt"
        table = tmp_path / "r.csv"
        fileio.write_report(path, self.report(), table)
        text = path.read_text()
        assert "D,false_alarm_pct,NA" in text
        assert "X,error,not calibrated" in text
        rows = table.read_text().splitlines()
        assert rows[0] == fileio.REPORT_COLUMNS
        assert rows[1].startswith("mll,100,0.420000")
        assert rows[2].endswith("error:not calibrated")
