"""End-to-end acceptance suite.

Every test prints one PASS/FAIL line with its headline numbers (run with
``pytest -s tests/test_acceptance.py`` to see them). Tolerances live in
the assertions; nothing here is calibrated after the fact.
"""

import time

import numpy as np
import pytest

from dfloc.calibration import (
    MixtureWeightCurve,
    bin_training_tuples,
    fit_mixture_weight,
    fit_spatial_params,
    robust_unaffected_estimate,
    train_spatial_model,
)
from dfloc.cli import main
from dfloc.config import SiteConfig, SiteRuntime
from dfloc.evaluation import (
    EstimateSeries,
    empty_area_means,
    evaluate_series,
    run_experiment,
)
from dfloc.geometry import Grid, LinkGeometry, WallSet, build_grid, neighbors
from dfloc.localizers import (
    ForwardState,
    RtiLocalizer,
    build_imaging_model,
    build_transition_model,
    hmml_step,
    lda_classify,
    lda_train,
)
from dfloc.pipeline import MplPipeline, TrainedModel
from dfloc.rssmodel import (
    Alphabet,
    LinkModel,
    RssFrame,
    SpatialParams,
    affected_probability,
    build_conditional_pmf,
    likelihood_map,
    mixture_probability,
)
from dfloc.simulator import (
    generate_trajectory,
    resolve_events,
    resolve_link_truth,
    synthesize_trace,
)

ALPHABET = Alphabet(-110, -10)


def report_line(tag: str, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {tag}: {'PASS' if ok else 'FAIL'} ({detail})")


# ---------------------------------------------------------------------------
# Shared 20-node site for the closed-loop criteria
# ---------------------------------------------------------------------------


def perimeter_nodes(width: float, height: float, n: int) -> dict[int, tuple[float, float]]:
    per = 2 * (width + height)
    nodes = {}
    for i, d in enumerate(np.arange(n) * per / n):
        if d < width:
            p = (d, 0.0)
        elif d < width + height:
            p = (width, d - width)
        elif d < 2 * width + height:
            p = (width - (d - width - height), height)
        else:
            p = (0.0, height - (d - 2 * width - height))
        nodes[i] = (float(p[0]), float(p[1]))
    return nodes


@pytest.fixture(scope="module")
def closed_loop():
    """Site, generating truth, training trace, and the trained model.

    Build time is recorded so the walking-accuracy criterion can charge it
    against its runtime budget.
    """
    start = time.perf_counter()
    site = SiteConfig(
        nodes=perimeter_nodes(10.0, 8.0, 20),
        channels=[11, 14, 17, 20],
        grid_bounds=(0.0, 0.0, 10.0, 8.0),
        grid_spacing=0.6,
        entrances=[(0.0, 0.0)],
    )
    runtime = SiteRuntime(site)
    truth = resolve_link_truth(
        {"mu_u": [-70, -50], "sigma2_u": 2.2, "beta": [0.6, 0.9], "lambda_m": [0.4, 0.8]},
        runtime.links,
        seed=40,
    )
    train_traj = generate_trajectory(
        runtime.grid,
        runtime.walls,
        {"random_walk": {"n_waypoints": 200}, "speed_mps": 1.0, "loop": True,
         "prologue_s": 120.0},
        frame_period=0.5,
        duration_s=480.0,
        seed=40,
    )
    train_trace = synthesize_trace(
        runtime.links, truth, train_traj, [], 0.01, seed=40, alphabet=runtime.alphabet
    )
    result = train_spatial_model(
        train_trace.timestamps,
        train_trace.values,
        runtime.links,
        runtime.grid,
        runtime.alphabet,
        runtime.tunables,
    )
    model = TrainedModel.from_training(result)
    build_s = time.perf_counter() - start
    return {
        "runtime": runtime,
        "truth": truth,
        "train_trace": train_trace,
        "model": model,
        "build_s": build_s,
    }


def replay_mpl(runtime, model, trace, method):
    pipeline = MplPipeline(runtime, model, method=method)
    coords = []
    for t in range(trace.n_frames):
        pixel = pipeline.step(trace.values[t], float(trace.timestamps[t]))
        coords.append(pipeline.estimate_coordinate(pixel))
    return EstimateSeries(method, trace.timestamps, coords)


def windowed_median_error(series, trace, mask):
    pos = trace.trajectory.positions
    inside = trace.trajectory.in_area()
    errors = [
        float(np.linalg.norm(c - p))
        for c, p, m, i in zip(series.coordinates, pos, mask, inside)
        if m and i and c is not None
    ]
    return float(np.median(errors))


# ---------------------------------------------------------------------------


def test_01_forward_algorithm_oracle():
    class DenseTransition:
        def __init__(self, matrix, pi):
            self.matrix, self.pi = matrix, pi

        def propagate(self, alpha):
            return alpha @ self.matrix

    start = time.perf_counter()
    worst = 0.0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 6))
        steps = int(rng.integers(2, 7))
        matrix = rng.random((n, n)) + 1e-3
        matrix /= matrix.sum(axis=1, keepdims=True)
        pi = rng.random(n) + 1e-3
        pi /= pi.sum()
        emissions = [rng.random(n) + 1e-6 for _ in range(steps)]

        transition = DenseTransition(matrix, pi)
        state = ForwardState.initial(pi, emissions[0])
        brute = pi * emissions[0]
        worst = max(worst, np.abs(state.alpha * np.exp(state.log_scale) / brute - 1).max())
        for e in emissions[1:]:
            state, _ = hmml_step(state, e, transition)
            brute = (brute @ matrix) * e
            scaled = state.alpha * np.exp(state.log_scale)
            worst = max(worst, np.abs(scaled / brute - 1).max())
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 10.0
    report_line("01 forward-oracle", ok, f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-9
    assert elapsed < 10.0


def test_02_likelihood_oracle():
    links = [
        LinkGeometry(0, 1, 11, np.array([0.0, 0.0]), np.array([4.0, 0.0])),
        LinkGeometry(1, 0, 14, np.array([4.0, 0.0]), np.array([0.0, 0.0])),
    ]
    grid = Grid(
        np.array([[1.0, 0.0], [2.0, 1.0], [3.5, 2.0]]),
        spacing=1.0,
        entrance_mask=np.zeros(3, bool),
    )
    from dfloc.geometry import excess_path_length

    worst = 0.0
    cases = 0
    for beta in (0.2, 0.5, 0.8):
        for lam in (0.3, 1.0, 3.0):
            for mu1 in (-60.0, -75.0):
                for r in ([-60.0, -74.0], [-62.0, np.nan], [np.nan, np.nan]):
                    models = [
                        LinkModel.build(mu1, 1.0, SpatialParams(beta, lam), ALPHABET),
                        LinkModel.build(-58.0, 2.0, SpatialParams(beta, lam), ALPHABET),
                    ]
                    out = likelihood_map(RssFrame(0.0, np.array(r)), models, links, grid)
                    expected = []
                    for k in range(grid.n_pixels + 1):
                        prod = 1.0
                        for i, (lk, m) in enumerate(zip(links, models)):
                            if k == grid.sentinel:
                                p_a = 1e-3
                            else:
                                p_a = affected_probability(
                                    m.spatial, excess_path_length(grid.coordinates[k], lk)
                                )
                            rv = None if np.isnan(r[i]) else r[i]
                            prod *= mixture_probability(rv, m.pmf_a, m.pmf_u, p_a)
                        expected.append(prod)
                    expected = np.array(expected)
                    expected /= expected.max()
                    worst = max(worst, np.abs(out.probabilities - expected).max())
                    cases += 1
    ok = worst < 1e-12
    report_line("02 likelihood-oracle", ok, f"max abs err {worst:.2e} over {cases} cases")
    assert worst < 1e-12


def test_03_spatial_parameter_recovery():
    mu_true, s2_true = -60.0, 2.2
    deltas = np.array([0.0, 0.1, 0.25, 0.5, 0.75, 1.0, 2.0, 4.0, 8.0])
    counts = np.array([1000, 1000, 1000, 1000, 1000, 1500, 3000, 10000, 30000])
    combos = [(b, l) for b in (0.5, 0.7, 0.9) for l in (0.3, 1.0, 3.0)]

    start = time.perf_counter()
    hits = 0
    for seed in range(100):
        beta, lam = combos[seed % len(combos)]
        rng = np.random.default_rng(seed)
        rss, dd = [], []
        for delta, n in zip(deltas, counts):
            p = beta * np.exp(-delta / lam)
            affected = rng.random(n) < p
            mu = np.where(affected, mu_true - 3.0, mu_true)
            sd = np.where(affected, np.sqrt(2.5 * s2_true), np.sqrt(s2_true))
            r = np.clip(np.round(mu + sd * rng.standard_normal(n)), ALPHABET.lo, ALPHABET.hi)
            rss.append(r)
            dd.append(np.full(n, delta))
        rss = np.concatenate(rss)
        dd = np.concatenate(dd)

        mu_u, s2_u = robust_unaffected_estimate(rss)
        pmf_a = build_conditional_pmf(mu_u - 3.0, 2.5 * s2_u, ALPHABET)
        pmf_u = build_conditional_pmf(mu_u, s2_u, ALPHABET)
        centers, hists = bin_training_tuples(rss, dd, ALPHABET)
        weights = np.array([fit_mixture_weight(h, pmf_a, pmf_u) for h in hists])
        fit = fit_spatial_params(MixtureWeightCurve(centers, weights))
        if abs(fit.beta - beta) <= 0.1 and abs(fit.lam - lam) / lam <= 0.25:
            hits += 1
    elapsed = time.perf_counter() - start
    ok = hits >= 90 and elapsed < 60.0
    report_line("03 spatial-recovery", ok, f"{hits}/100 trials ok, {elapsed:.1f}s")
    assert hits >= 90
    assert elapsed < 60.0


def test_04_closed_loop_walking_accuracy(closed_loop):
    runtime = closed_loop["runtime"]
    start = time.perf_counter()
    test_traj = generate_trajectory(
        runtime.grid,
        runtime.walls,
        {"random_walk": {"n_waypoints": 250}, "speed_mps": 1.0, "loop": True,
         "prologue_s": 60.0},
        frame_period=0.5,
        duration_s=600.0,
        seed=41,
    )
    trace = synthesize_trace(
        runtime.links, closed_loop["truth"], test_traj, [], 0.01, seed=41,
        alphabet=runtime.alphabet,
    )
    results = {}
    for method in ("mll", "hmml"):
        series = replay_mpl(runtime, closed_loop["model"], trace, method)
        results[method] = evaluate_series(series, trace.trajectory.positions)
    elapsed = time.perf_counter() - start + closed_loop["build_s"]
    ok = all(r.median_error_m <= 1.2 for r in results.values()) and elapsed < 120.0
    detail = ", ".join(f"{m} e_med={r.median_error_m:.2f}m" for m, r in results.items())
    report_line("04 closed-loop", ok, f"{detail}, {elapsed:.0f}s incl. training")
    for r in results.values():
        assert r.median_error_m <= 1.2
    assert elapsed < 120.0


def test_05_stationary_person_detection(closed_loop):
    runtime = closed_loop["runtime"]
    test_traj = generate_trajectory(
        runtime.grid,
        runtime.walls,
        {
            "waypoints": [[2.4, 2.4], [7.2, 3.0], [8.4, 6.0], [3.0, 6.0], [5.4, 4.2]],
            "dwell_s": [10.0, 120.0, 10.0, 120.0, 30.0],
            "speed_mps": 1.0,
            "prologue_s": 60.0,
            "loop": True,
        },
        frame_period=0.5,
        duration_s=600.0,
        seed=51,
    )
    trace = synthesize_trace(
        runtime.links, closed_loop["truth"], test_traj, [], 0.01, seed=51,
        alphabet=runtime.alphabet,
    )
    report, _ = run_experiment(
        runtime, ["krti", "mll", "hmml"], trace, closed_loop["train_trace"]
    )
    md = {m.method: m.missed_detection_pct for m in report.methods}
    mpl_worst = max(md["mll"], md["hmml"])
    ok = md["mll"] < 1.0 and md["hmml"] < 1.0 and md["krti"] >= 10.0 * max(mpl_worst, 1e-12)
    report_line(
        "05 stationary-person",
        ok,
        f"md krti={md['krti']:.1f}% mll={md['mll']:.2f}% hmml={md['hmml']:.2f}%",
    )
    assert md["mll"] < 1.0
    assert md["hmml"] < 1.0
    if mpl_worst > 0:
        assert md["krti"] >= 10.0 * mpl_worst
    else:
        assert md["krti"] > 0.0


@pytest.fixture(scope="module")
def recalibration_run(closed_loop):
    """Shared environment-shift experiment for the recalibration criteria."""
    runtime = closed_loop["runtime"]
    site = runtime.config
    shift_t = 360.0
    west = [16, 17, 18, 19]
    pairs = [[a, b, ch] for a in west for b in west if a != b for ch in site.channels]
    events = resolve_events(
        [{"time_s": shift_t, "shift_dbm": 6.0, "links": pairs}], runtime.links
    )
    shifted = np.nonzero(events[0].shifts != 0)[0]
    test_traj = generate_trajectory(
        runtime.grid,
        runtime.walls,
        {
            "waypoints": [[7.5, 2.7], [8.7, 3.9], [8.1, 5.7], [6.9, 4.5]],
            "dwell_s": 5.0,
            "speed_mps": 1.0,
            "prologue_s": 60.0,
            "loop": True,
        },
        frame_period=0.5,
        duration_s=900.0,
        seed=61,
    )
    trace = synthesize_trace(
        runtime.links, closed_loop["truth"], test_traj, events, 0.01, seed=61,
        alphabet=runtime.alphabet,
    )

    def run_with_history(method):
        pipeline = MplPipeline(runtime, closed_loop["model"], method=method)
        coords, mu_hist = [], []
        for t in range(trace.n_frames):
            pixel = pipeline.step(trace.values[t], float(trace.timestamps[t]))
            coords.append(pipeline.estimate_coordinate(pixel))
            mu_hist.append(pipeline.committed_mu()[shifted].copy())
        return EstimateSeries(method, trace.timestamps, coords), np.asarray(mu_hist)

    mll_series, mll_mu = run_with_history("mll")
    hmml_series, _ = run_with_history("hmml")
    return {
        "trace": trace,
        "shift_t": shift_t,
        "shifted": shifted,
        "mll": mll_series,
        "mll_mu": mll_mu,
        "hmml": hmml_series,
    }


def test_06_continuous_recalibration(closed_loop, recalibration_run):
    runtime = closed_loop["runtime"]
    trace = recalibration_run["trace"]
    shift_t = recalibration_run["shift_t"]
    shifted = recalibration_run["shifted"]
    ts = trace.timestamps
    target = closed_loop["truth"].mu_u[shifted] + 6.0

    deadline = int(np.searchsorted(ts, shift_t + 300.0))
    mu_err = np.abs(recalibration_run["mll_mu"][deadline] - target)
    converged = bool((mu_err <= 1.0).all())

    pre = ts < shift_t
    post = ts >= shift_t + 300.0
    e_pre = windowed_median_error(recalibration_run["mll"], trace, pre)
    e_post = windowed_median_error(recalibration_run["mll"], trace, post)
    stable = e_post <= 1.25 * e_pre
    ok = converged and stable
    report_line(
        "06 recalibration",
        ok,
        f"{len(shifted)} shifted links, worst mu err {mu_err.max():.2f} dBm at +5min, "
        f"mll e_med pre={e_pre:.2f} post={e_post:.2f}",
    )
    assert converged
    assert stable


def test_07_baseline_degradation(closed_loop, recalibration_run):
    runtime = closed_loop["runtime"]
    trace = recalibration_run["trace"]
    shift_t = recalibration_run["shift_t"]
    ts = trace.timestamps
    tun = runtime.tunables

    imaging = build_imaging_model(
        runtime.links,
        runtime.grid,
        deltas=runtime.deltas,
        ellipse_width=tun.ellipse_width_m,
        regularization=tun.rti_regularization,
        ridge=tun.rti_ridge,
        vacancy_fraction=tun.vacancy_fraction,
        min_peak=tun.vacancy_min_peak,
        vacancy_smoothing=tun.vacancy_smoothing,
    )
    rti = RtiLocalizer(imaging, empty_area_means(closed_loop["train_trace"]))
    coords = []
    for t in range(trace.n_frames):
        pixel = rti.step(trace.values[t])
        coords.append(
            None if pixel == runtime.grid.sentinel else runtime.grid.coordinates[pixel]
        )
    rti_series = EstimateSeries("rti", ts, coords)

    pre = ts < shift_t
    post = ts >= shift_t
    rti_pre = windowed_median_error(rti_series, trace, pre)
    rti_post = windowed_median_error(rti_series, trace, post)
    hmml_pre = windowed_median_error(recalibration_run["hmml"], trace, pre)
    hmml_post = windowed_median_error(recalibration_run["hmml"], trace, post)

    rti_degraded = rti_post >= 1.5 * rti_pre
    hmml_held = hmml_post < 1.5 * max(hmml_pre, runtime.grid.spacing / 2)
    ok = rti_degraded and hmml_held
    report_line(
        "07 baseline-degradation",
        ok,
        f"rti {rti_pre:.2f}->{rti_post:.2f}m, hmml {hmml_pre:.2f}->{hmml_post:.2f}m",
    )
    assert rti_degraded
    assert hmml_held


def test_08_distribution_and_normalization_suite():
    rng = np.random.default_rng(88)
    worst_total = 0.0
    for _ in range(1000):
        mu = rng.uniform(-105, -15)
        sigma2 = rng.uniform(0.5625, 40.0)
        pmf = build_conditional_pmf(mu, sigma2, ALPHABET)
        assert (pmf.masses >= 1e-5).all()
        assert pmf.prob(None) == 1e-5
        total = pmf.total()
        assert 1.0 <= total <= 1.0 + ALPHABET.n_symbols * 1e-5
        worst_total = max(worst_total, total)

    grid = build_grid((0.0, 0.0, 4.2, 3.0), 0.6, WallSet.empty(), [(0.0, 0.0)])
    adjacency = neighbors(grid, WallSet.empty(), max_step=0.75)
    transition = build_transition_model(grid, adjacency)
    row_err = np.abs(transition.dense().sum(axis=1) - 1.0).max()
    pi_err = abs(transition.pi.sum() - 1.0)
    assert row_err < 1e-9
    assert pi_err < 1e-9

    monotone = True
    for _ in range(200):
        sp = SpatialParams(rng.uniform(0.05, 0.95), rng.uniform(0.05, 5.0))
        deltas = np.sort(rng.uniform(0.0, 8.0, size=12))
        deltas = np.unique(deltas)
        probs = [affected_probability(sp, d) for d in deltas]
        monotone &= all(a > b for a, b in zip(probs, probs[1:]))
    ok = monotone and row_err < 1e-9
    report_line(
        "08 distributions",
        ok,
        f"1000 pmfs ok (max total {worst_total:.6f}), row err {row_err:.1e}, "
        f"decay monotone={monotone}",
    )
    assert monotone


def test_09_robust_estimation():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        samples = rng.normal(-60.0, 2.0, size=100_000)
        _, s2 = robust_unaffected_estimate(samples)
        worst = max(worst, abs(s2 - 4.0) / 4.0)
    ok = worst < 0.05
    report_line("09 robust-estimation", ok, f"worst rel err {worst:.3f} over 50 seeds")
    assert worst < 0.05


def test_10_lda_suite():
    rng = np.random.default_rng(10)
    means = [np.zeros(4), np.array([4.0, 4.0, 0.0, 2.0])]
    classes = [
        (np.array([float(i), 0.0]), mu + rng.normal(0, 1.0, size=(50, 4)))
        for i, mu in enumerate(means)
    ]

    full = lda_train(classes, shrinkage=1.0)
    ridge_exact = np.allclose(full.covariance, full.ridge_scale * np.eye(4), rtol=0, atol=0)
    none = lda_train(classes, shrinkage=0.0)
    scatter = np.zeros((4, 4))
    total = 0
    for _, frames in classes:
        dev = frames - frames.mean(axis=0)
        scatter += dev.T @ dev
        total += frames.shape[0]
    pooled_exact = np.allclose(
        none.covariance, scatter / (total - (len(classes) - 1)), rtol=0, atol=0
    )

    model = lda_train(classes, shrinkage=0.3)
    precision = np.linalg.inv(model.covariance)
    oracle_err = 0.0
    for _ in range(20):
        frame = rng.normal(1.0, 2.0, size=4)
        want = np.array(
            [frame @ precision @ mu - 0.5 * mu @ precision @ mu for mu in model.class_means]
        )
        oracle_err = max(oracle_err, np.abs(model.scores(frame) - want).max())

    correct = total_eval = 0
    for k in range(2):
        for _ in range(200):
            frame = model.class_means[k] + rng.normal(0, 1.0, size=4)
            correct += lda_classify(frame, model) == k
            total_eval += 1
    accuracy = correct / total_eval

    ok = ridge_exact and pooled_exact and oracle_err < 1e-9 and accuracy >= 0.95
    report_line(
        "10 lda-suite",
        ok,
        f"limits exact={ridge_exact and pooled_exact}, oracle err {oracle_err:.1e}, "
        f"accuracy {accuracy:.3f}",
    )
    assert ridge_exact and pooled_exact
    assert oracle_err < 1e-9
    assert accuracy >= 0.95


def test_11_determinism_and_round_trips(tmp_path):
    import json

    site = {
        "nodes": {"0": [0.0, 0.0], "1": [2.5, 0.0], "2": [5.0, 0.0],
                  "3": [5.0, 4.0], "4": [2.5, 4.0], "5": [0.0, 4.0]},
        "channels": [11, 14],
        "grid_bounds": [0.0, 0.0, 5.0, 4.0],
        "grid_spacing": 1.0,
        "entrances": [[0.0, 0.0]],
    }
    (tmp_path / "site.json").write_text(json.dumps(site))
    scenario = {
        "site_file": "site.json",
        "trajectory": {"waypoints": [[1.0, 1.0], [4.0, 2.0]], "dwell_s": 8.0,
                       "speed_mps": 1.0, "prologue_s": 20.0, "loop": True},
        "link_truth": {"mu_u": [-65, -55], "sigma2_u": 2.2, "beta": 0.7, "lambda_m": 0.5},
        "duration_s": 120.0,
        "frame_period_s": 0.5,
        "seed": 21,
    }
    (tmp_path / "scenario.json").write_text(json.dumps(scenario))

    t1, t2 = tmp_path / "t1.trace", tmp_path / "t2.trace"
    assert main(["simulate", "--scenario", str(tmp_path / "scenario.json"), "--out", str(t1)]) == 0
    assert main(["simulate", "--scenario", str(tmp_path / "scenario.json"), "--out", str(t2)]) == 0
    traces_identical = t1.read_bytes() == t2.read_bytes()

    e1, e2 = tmp_path / "e1.est", tmp_path / "e2.est"
    for out in (e1, e2):
        assert main(["run", "--trace", str(t1), "--site", str(tmp_path / "site.json"),
                     "--method", "krti", "--out", str(out)]) == 0
    estimates_identical = e1.read_bytes() == e2.read_bytes()

    r1, r2 = tmp_path / "r1.txt", tmp_path / "r2.txt"
    for out in (r1, r2):
        assert main(["evaluate", "--trace", str(t1), "--estimates", str(e1),
                     "--out", str(out)]) == 0
    reports_identical = r1.read_bytes() == r2.read_bytes()

    from dfloc import fileio

    back = fileio.read_trace(t1)
    reread = tmp_path / "reread.trace"
    fileio.write_trace(reread, back)
    round_trip_exact = reread.read_bytes() == t1.read_bytes()

    ok = traces_identical and estimates_identical and reports_identical and round_trip_exact
    report_line(
        "11 determinism",
        ok,
        f"traces={traces_identical} estimates={estimates_identical} "
        f"reports={reports_identical} round-trip={round_trip_exact}",
    )
    assert traces_identical
    assert estimates_identical
    assert reports_identical
    assert round_trip_exact
