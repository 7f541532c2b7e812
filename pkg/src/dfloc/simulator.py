"""Synthetic RSS trace generation.

Samples the same generative structure the localizers assume: per frame and
link, a Bernoulli affected/unaffected state drawn from the spatial decay at
the person's true position, then a Gaussian RSS draw from that state,
quantized to the integer alphabet, with optional packet loss and
injectable environment shifts.

Every link owns a counter-based RNG stream keyed by its (tx, rx, channel)
identity, so regenerating with more links, or in parallel, never perturbs
existing links' draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig
from .errors import ConfigError, InputError, PathError
from .geometry import Grid, LinkGeometry, WallSet, segment_intersects_wall
from .rssmodel import SENTINEL_AFFECTED_PROB, Alphabet

# Spawn-key tags keeping trajectory / truth randomization streams disjoint
# from the per-link trace streams (which are keyed by (tx, rx, channel)).
_TRAJECTORY_STREAM = 1_000_003
_TRUTH_STREAM = 1_000_033


@dataclass
class Trajectory:
    """Timestamped true positions; NaN rows mean out of the area."""

    timestamps: np.ndarray  # (T,)
    positions: np.ndarray  # (T, 2)
    frame_period: float

    def __post_init__(self) -> None:
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.shape != (self.timestamps.shape[0], 2):
            raise InputError("positions must be (T, 2)")

    @property
    def n_frames(self) -> int:
        return self.timestamps.shape[0]

    def in_area(self) -> np.ndarray:
        return ~np.isnan(self.positions).any(axis=1)


def validate_trajectory(
    trajectory: Trajectory,
    grid: Grid,
    max_speed: float = 3.0,
    entrance_tol: float | None = None,
) -> None:
    """Check the speed bound and that in/out transitions happen at entrances.

    ``entrance_tol`` defaults to one grid spacing.
    """
    tol = grid.spacing if entrance_tol is None else entrance_tol
    inside = trajectory.in_area()
    pos = trajectory.positions
    step_limit = max_speed * trajectory.frame_period * (1.0 + 1e-9)
    both = inside[:-1] & inside[1:]
    if both.any():
        steps = np.linalg.norm(pos[1:][both] - pos[:-1][both], axis=1)
        if steps.max() > step_limit:
            raise InputError(f"trajectory step {steps.max():.3f} m exceeds the speed bound")
    entrances = grid.coordinates[grid.entrance_mask]
    if entrances.size == 0:
        if (inside[:-1] != inside[1:]).any():
            raise InputError("trajectory crosses the boundary but the grid has no entrances")
        return
    for t in np.nonzero(inside[:-1] != inside[1:])[0]:
        boundary_pos = pos[t] if inside[t] else pos[t + 1]
        gap = np.linalg.norm(entrances - boundary_pos, axis=1).min()
        if gap > tol + 1e-9:
            raise InputError(f"boundary crossing at t={trajectory.timestamps[t]:.2f}s "
                             f"is {gap:.2f} m from the nearest entrance")


def _check_leg(a: np.ndarray, b: np.ndarray, walls: WallSet) -> None:
    if len(walls) and segment_intersects_wall(a, b, walls):
        raise PathError(f"leg {a.tolist()} -> {b.tolist()} crosses a wall")


def generate_trajectory(
    grid: Grid,
    walls: WallSet,
    spec: dict,
    frame_period: float,
    duration_s: float,
    max_speed: float = 3.0,
    seed: int = 0,
) -> Trajectory:
    """Piecewise-linear walk through waypoints, sampled at the frame period.

    spec keys:
        waypoints          list of [x, y] (or use random_walk)
        random_walk        {"n_waypoints": int} for seeded wall-respecting
                           waypoints drawn from the grid pixels
        speed_mps          walking speed (default 1.0)
        dwell_s            stationary time at each waypoint: scalar or list
        prologue_s         out-of-area time before entering (default 0)
        epilogue_s         out-of-area time at the end (default 0)
        loop               cycle the waypoints until time runs out

    Entry and exit go through the entrance pixel nearest the first/last
    waypoint. Legs that cross a wall raise PathError.
    """
    speed = float(spec.get("speed_mps", 1.0))
    if not 0.0 < speed <= max_speed:
        raise ConfigError(f"speed {speed} m/s outside (0, {max_speed}]")
    prologue = float(spec.get("prologue_s", 0.0))
    epilogue = float(spec.get("epilogue_s", 0.0))
    loop = bool(spec.get("loop", False))

    if "waypoints" in spec:
        waypoints = [np.asarray(w, dtype=float) for w in spec["waypoints"]]
    elif "random_walk" in spec:
        n_wp = int(spec["random_walk"]["n_waypoints"])
        waypoints = _random_waypoints(grid, walls, n_wp, seed)
    else:
        raise ConfigError("trajectory spec needs 'waypoints' or 'random_walk'")
    if not waypoints:
        raise ConfigError("trajectory needs at least one waypoint")

    dwell_spec = spec.get("dwell_s", 0.0)
    if np.isscalar(dwell_spec):
        dwells = [float(dwell_spec)] * len(waypoints)
    else:
        dwells = [float(d) for d in dwell_spec]
        if len(dwells) != len(waypoints):
            raise ConfigError("dwell_s list must match the waypoint count")

    entrances = grid.coordinates[grid.entrance_mask]
    needs_gate = prologue > 0 or epilogue > 0
    if needs_gate and entrances.size == 0:
        raise PathError("cannot enter/leave: grid has no entrance pixels")

    # Anchor timeline: (time, position) pairs; position is piecewise-linear
    # between anchors, out of area before the first and after the last.
    anchors_t: list[float] = []
    anchors_p: list[np.ndarray] = []

    def walk_to(point: np.ndarray) -> None:
        prev_t, prev_p = anchors_t[-1], anchors_p[-1]
        _check_leg(prev_p, point, walls)
        anchors_t.append(prev_t + float(np.linalg.norm(point - prev_p)) / speed)
        anchors_p.append(point)

    t_enter = prologue
    if prologue > 0:
        entry = entrances[np.argmin(np.linalg.norm(entrances - waypoints[0], axis=1))]
        anchors_t.append(t_enter)
        anchors_p.append(entry)
        walk_to(waypoints[0])
    else:
        anchors_t.append(0.0)
        anchors_p.append(waypoints[0])
    anchors_t.append(anchors_t[-1] + dwells[0])
    anchors_p.append(waypoints[0])

    exit_budget = epilogue
    if epilogue > 0:
        exit_point = entrances[np.argmin(np.linalg.norm(entrances - waypoints[-1], axis=1))]
        exit_budget += float(np.linalg.norm(exit_point - waypoints[-1])) / speed

    def visit_rest() -> None:
        for wp, dwell in zip(waypoints[1:], dwells[1:]):
            walk_to(wp)
            anchors_t.append(anchors_t[-1] + dwell)
            anchors_p.append(wp)

    visit_rest()
    if loop and len(waypoints) > 1:
        _check_leg(waypoints[-1], waypoints[0], walls)
        while anchors_t[-1] < duration_s - exit_budget:
            walk_to(waypoints[0])
            anchors_t.append(anchors_t[-1] + dwells[0])
            anchors_p.append(waypoints[0])
            visit_rest()

    if epilogue > 0:
        exit_point = entrances[np.argmin(np.linalg.norm(entrances - anchors_p[-1], axis=1))]
        walk_to(exit_point)
        t_exit = anchors_t[-1]
    else:  # no epilogue: hold the final position to the end of the trace
        t_exit = duration_s + frame_period

    n_frames = int(round(duration_s / frame_period))
    timestamps = np.arange(n_frames) * frame_period
    positions = np.full((n_frames, 2), np.nan)
    inside = (timestamps >= t_enter - 1e-9) & (timestamps <= t_exit + 1e-9)
    if inside.any():
        at = np.asarray(anchors_t)
        ap = np.stack(anchors_p)
        positions[inside, 0] = np.interp(timestamps[inside], at, ap[:, 0])
        positions[inside, 1] = np.interp(timestamps[inside], at, ap[:, 1])
    return Trajectory(timestamps=timestamps, positions=positions, frame_period=frame_period)


def _random_waypoints(grid: Grid, walls: WallSet, n: int, seed: int) -> list[np.ndarray]:
    """Seeded waypoints drawn from grid pixels with wall-free legs.

    A start pixel that cannot reach anywhere (e.g. it sits on a wall, where
    the conservative touch-counts-as-blocked rule strands it) is redrawn.
    """
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(_TRAJECTORY_STREAM,)))
    )
    coords = grid.coordinates
    points = [coords[int(rng.integers(len(coords)))]]
    leg_attempts = 0
    while len(points) < n:
        candidate = coords[int(rng.integers(len(coords)))]
        leg_attempts += 1
        if leg_attempts > 500:
            if len(points) == 1:
                points[0] = coords[int(rng.integers(len(coords)))]
                leg_attempts = 0
                continue
            raise PathError("random walk could not find wall-free legs")
        if np.allclose(candidate, points[-1]):
            continue
        if len(walls) and segment_intersects_wall(points[-1], candidate, walls):
            continue
        points.append(candidate)
        leg_attempts = 0
    return points


@dataclass
class LinkTruth:
    """Generating parameters per link, aligned with the link list."""

    mu_u: np.ndarray
    sigma2_u: np.ndarray
    mu_a: np.ndarray
    sigma2_a: np.ndarray
    beta: np.ndarray
    lam: np.ndarray


def resolve_link_truth(
    spec: dict,
    links: list[LinkGeometry],
    seed: int,
    mean_shift: float = 3.0,
    variance_scale: float = 2.5,
) -> LinkTruth:
    """Expand a scalar-or-range parameter spec into per-link arrays.

    Ranges ([lo, hi]) are drawn uniformly per link from a stream keyed by
    the link identity, so the draw for one link never depends on which
    other links exist.
    """

    def per_link(key: str, default: float) -> np.ndarray:
        raw = spec.get(key, default)
        if np.isscalar(raw):
            return np.full(len(links), float(raw))
        lo, hi = float(raw[0]), float(raw[1])
        out = np.empty(len(links))
        for i, link in enumerate(links):
            ss = np.random.SeedSequence(
                entropy=seed, spawn_key=(link.tx, link.rx, link.channel, _TRUTH_STREAM)
            )
            draws = np.random.Generator(np.random.Philox(ss)).random(4)
            out[i] = lo + (hi - lo) * draws[_TRUTH_KEYS[key]]
        return out

    mu_u = per_link("mu_u", -60.0)
    sigma2_u = per_link("sigma2_u", 1.0)
    beta = per_link("beta", 0.8)
    lam = per_link("lambda_m", 1.0)
    if (sigma2_u <= 0).any() or (lam <= 0).any() or (beta <= 0).any() or (beta >= 1).any():
        raise ConfigError("link truth parameters out of range")
    return LinkTruth(
        mu_u=mu_u,
        sigma2_u=sigma2_u,
        mu_a=mu_u - mean_shift,
        sigma2_a=variance_scale * sigma2_u,
        beta=beta,
        lam=lam,
    )


_TRUTH_KEYS = {"mu_u": 0, "sigma2_u": 1, "beta": 2, "lambda_m": 3}


@dataclass
class EnvironmentEvent:
    """Additive unaffected-mean shift on a set of links from a given time.

    The affected mean shifts by the same amount, so the unaffected/affected
    separation is preserved.
    """

    time_s: float
    shifts: np.ndarray  # (L,) dBm


def resolve_events(specs: list[dict], links: list[LinkGeometry]) -> list[EnvironmentEvent]:
    """Expand declarative event specs into per-link shift vectors."""
    events = []
    index = {link.link_id: i for i, link in enumerate(links)}
    for entry in specs:
        shifts = np.zeros(len(links))
        shift = float(entry["shift_dbm"])
        if "links" in entry:
            for lid in entry["links"]:
                key = tuple(int(v) for v in lid)
                if key not in index:
                    raise InputError(f"event references unknown link {key}")
                shifts[index[key]] = shift
        elif "nodes" in entry:
            nodes = {int(n) for n in entry["nodes"]}
            known = {link.tx for link in links} | {link.rx for link in links}
            if not nodes <= known:
                raise InputError(f"event references unknown node ids {sorted(nodes - known)}")
            for i, link in enumerate(links):
                if link.tx in nodes or link.rx in nodes:
                    shifts[i] = shift
        else:
            raise InputError("event needs a 'links' or 'nodes' selector")
        events.append(EnvironmentEvent(time_s=float(entry["time_s"]), shifts=shifts))
    return events


def inject_environment_change(
    events: list[EnvironmentEvent],
    event: EnvironmentEvent,
    duration_s: float,
) -> list[EnvironmentEvent]:
    """Add an event to a trace's generating parameters; shifts compose
    additively with any events already present."""
    if not 0.0 <= event.time_s <= duration_s:
        raise InputError("event time outside the trace span")
    return [*events, event]


@dataclass
class GroundTruthTrace:
    """An RSS record paired with the trajectory behind it.

    Synthesized traces carry their generating parameters; traces read back
    from disk carry only the observable fields.
    """

    timestamps: np.ndarray  # (T,)
    values: np.ndarray  # (T, L) NaN = missing
    trajectory: Trajectory
    links: list[LinkGeometry]
    frame_period: float
    truth: LinkTruth | None = None
    events: list[EnvironmentEvent] = field(default_factory=list)
    seed: int = 0
    loss_prob: float = 0.0
    truth_recorded: bool = True  # False for files carrying no ground truth

    @property
    def n_frames(self) -> int:
        return self.timestamps.shape[0]


def synthesize_trace(
    links: list[LinkGeometry],
    truth: LinkTruth,
    trajectory: Trajectory,
    events: list[EnvironmentEvent],
    loss_prob: float,
    seed: int,
    alphabet: Alphabet,
    sentinel_prob: float = SENTINEL_AFFECTED_PROB,
) -> GroundTruthTrace:
    """Sample a full RSS trace along a trajectory; bit-identical per seed.

    Per frame and link: the affected state is Bernoulli in the spatial
    decay at the true position (the fixed out-of-area constant when the
    person is out), RSS is then Gaussian in that state with any active
    event shifts applied, clamped to the alphabet, and rounded to integer
    dBm. Packets are independently lost with probability loss_prob.
    """
    if not 0.0 <= loss_prob <= 1.0:
        raise InputError("loss_prob must lie in [0, 1]")
    for event in events:
        if not 0.0 <= event.time_s <= trajectory.timestamps[-1] + trajectory.frame_period:
            raise InputError("event time outside the trace span")
    n_frames = trajectory.n_frames
    inside = trajectory.in_area()
    values = np.empty((n_frames, len(links)))

    for i, link in enumerate(links):
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(link.tx, link.rx, link.channel))
        rng = np.random.Generator(np.random.Philox(ss))
        u_state = rng.random(n_frames)
        z = rng.standard_normal(n_frames)
        u_loss = rng.random(n_frames)

        p_aff = np.full(n_frames, sentinel_prob)
        if inside.any():
            pos = trajectory.positions[inside]
            delta = (
                np.linalg.norm(pos - link.tx_coord, axis=1)
                + np.linalg.norm(pos - link.rx_coord, axis=1)
                - link.length
            )
            p_aff[inside] = truth.beta[i] * np.exp(-np.maximum(delta, 0.0) / truth.lam[i])

        shift = np.zeros(n_frames)
        for event in events:
            shift[trajectory.timestamps >= event.time_s] += event.shifts[i]

        affected = u_state < p_aff
        mu = np.where(affected, truth.mu_a[i], truth.mu_u[i]) + shift
        sigma = np.where(affected, np.sqrt(truth.sigma2_a[i]), np.sqrt(truth.sigma2_u[i]))
        rss = np.round(np.clip(mu + sigma * z, alphabet.lo, alphabet.hi))
        rss[u_loss < loss_prob] = np.nan
        values[:, i] = rss

    return GroundTruthTrace(
        timestamps=trajectory.timestamps.copy(),
        values=values,
        trajectory=trajectory,
        links=links,
        frame_period=trajectory.frame_period,
        truth=truth,
        events=events,
        seed=seed,
        loss_prob=loss_prob,
    )


def simulate_scenario(scenario: ScenarioConfig) -> GroundTruthTrace:
    """Build everything a scenario describes and synthesize its trace."""
    site = scenario.site
    grid = site.build_grid()
    walls = site.wall_set()
    links = site.links()
    trajectory = generate_trajectory(
        grid,
        walls,
        scenario.trajectory,
        frame_period=scenario.frame_period_s,
        duration_s=scenario.duration_s,
        max_speed=site.tunables.max_speed_mps,
        seed=scenario.seed,
    )
    truth = resolve_link_truth(
        scenario.link_truth,
        links,
        scenario.seed,
        mean_shift=site.tunables.mean_shift_dbm,
        variance_scale=site.tunables.variance_scale,
    )
    events = resolve_events(scenario.events, links)
    return synthesize_trace(
        links,
        truth,
        trajectory,
        events,
        loss_prob=scenario.loss_prob,
        seed=scenario.seed,
        alphabet=site.alphabet(),
        sentinel_prob=site.tunables.sentinel_affected_prob,
    )
