"""Node/link layout, localization grid, and excess-path-length geometry.

Everything here is immutable after construction and safe to share across
workers. Distances are meters throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

# Lattice pixels this close to each other (relative to spacing) are treated
# as adjacent when building the image-difference operator.
_COORD_EQ_TOL = 1e-9


@dataclass(frozen=True)
class NodeLayout:
    """Static node placement: small-integer node id -> 2D coordinate."""

    nodes: dict[int, np.ndarray]

    def __post_init__(self) -> None:
        for node_id, coord in self.nodes.items():
            c = np.asarray(coord, dtype=float)
            if c.shape != (2,) or not np.all(np.isfinite(c)):
                raise ConfigError(f"node {node_id}: coordinate must be a finite 2-vector")
            self.nodes[node_id] = c

    def coordinate(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id]

    @property
    def ids(self) -> list[int]:
        return sorted(self.nodes)


@dataclass(frozen=True)
class LinkGeometry:
    """A directed (tx, rx, channel) measurement link and its endpoints."""

    tx: int
    rx: int
    channel: int
    tx_coord: np.ndarray
    rx_coord: np.ndarray
    length: float = field(init=False)

    def __post_init__(self) -> None:
        if self.tx == self.rx:
            raise ConfigError(f"link ({self.tx},{self.rx},{self.channel}): tx == rx")
        length = float(np.linalg.norm(self.tx_coord - self.rx_coord))
        if not length > 0.0:
            raise ConfigError(f"link ({self.tx},{self.rx},{self.channel}): zero length")
        object.__setattr__(self, "length", length)

    @property
    def link_id(self) -> tuple[int, int, int]:
        return (self.tx, self.rx, self.channel)


def make_links(layout: NodeLayout, channels: list[int]) -> list[LinkGeometry]:
    """All ordered node pairs crossed with the channel list, in canonical
    (tx, rx, channel) order. This ordering defines frame vector indices."""
    if not channels:
        raise ConfigError("channel list is empty")
    links = []
    ids = layout.ids
    for tx in ids:
        for rx in ids:
            if tx == rx:
                continue
            for ch in channels:
                links.append(LinkGeometry(tx, rx, ch, layout.coordinate(tx), layout.coordinate(rx)))
    return links


@dataclass(frozen=True)
class WallSet:
    """RF-opaque barriers as 2D line segments, shape (n, 2, 2)."""

    segments: np.ndarray

    def __post_init__(self) -> None:
        seg = np.asarray(self.segments, dtype=float).reshape(-1, 2, 2)
        if not np.all(np.isfinite(seg)):
            raise ConfigError("wall segment endpoints must be finite")
        if seg.shape[0] and np.any(np.all(seg[:, 0] == seg[:, 1], axis=1)):
            raise ConfigError("wall segment endpoints must be distinct")
        object.__setattr__(self, "segments", seg)

    @classmethod
    def empty(cls) -> "WallSet":
        return cls(np.zeros((0, 2, 2)))

    def __len__(self) -> int:
        return self.segments.shape[0]


@dataclass(frozen=True)
class Grid:
    """P in-area pixels plus the out-of-area hypothesis at index P.

    The out-of-area pixel has no coordinate; every operation treats its
    index symbolically. ``entrance_mask`` marks the pixels through which a
    person can enter or leave the area.
    """

    coordinates: np.ndarray  # (P, 2)
    spacing: float
    entrance_mask: np.ndarray  # (P,) bool

    def __post_init__(self) -> None:
        coords = np.asarray(self.coordinates, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] == 0:
            raise ConfigError("grid needs at least one in-area pixel")
        if not self.spacing > 0:
            raise ConfigError("grid spacing must be positive")
        if len(np.unique(coords.round(9), axis=0)) != coords.shape[0]:
            raise ConfigError("grid pixels must be pairwise distinct")
        object.__setattr__(self, "coordinates", coords)
        object.__setattr__(self, "entrance_mask", np.asarray(self.entrance_mask, dtype=bool))

    @property
    def n_pixels(self) -> int:
        """Number of in-area pixels (P)."""
        return self.coordinates.shape[0]

    @property
    def sentinel(self) -> int:
        """Index of the out-of-area pixel."""
        return self.coordinates.shape[0]


def excess_path_length(point: np.ndarray, link: LinkGeometry) -> float:
    """d(point, tx) + d(point, rx) - d(tx, rx); zero exactly on the link line."""
    p = np.asarray(point, dtype=float)
    d = np.linalg.norm(p - link.tx_coord) + np.linalg.norm(p - link.rx_coord) - link.length
    return max(float(d), 0.0)


def excess_path_lengths(points: np.ndarray, link: LinkGeometry) -> np.ndarray:
    """Vectorized excess_path_length over an (n, 2) array of points."""
    pts = np.asarray(points, dtype=float)
    d = (
        np.linalg.norm(pts - link.tx_coord, axis=1)
        + np.linalg.norm(pts - link.rx_coord, axis=1)
        - link.length
    )
    return np.maximum(d, 0.0)


def delta_table(grid: Grid, links: list[LinkGeometry]) -> np.ndarray:
    """Excess path length of every in-area pixel w.r.t. every link, shape (L, P).

    Precomputed once per (grid, layout); the per-frame likelihood loop and the
    imaging weight matrices all index into this table.
    """
    return np.stack([excess_path_lengths(grid.coordinates, link) for link in links])


@dataclass(frozen=True)
class LinkArrays:
    """Stacked link endpoints for vectorized per-point excess path lengths."""

    tx: np.ndarray  # (L, 2)
    rx: np.ndarray  # (L, 2)
    length: np.ndarray  # (L,)

    @classmethod
    def from_links(cls, links: list[LinkGeometry]) -> "LinkArrays":
        return cls(
            tx=np.stack([link.tx_coord for link in links]),
            rx=np.stack([link.rx_coord for link in links]),
            length=np.array([link.length for link in links]),
        )

    def point_deltas(self, point: np.ndarray) -> np.ndarray:
        """Excess path length of one point w.r.t. every link, shape (L,)."""
        d = (
            np.linalg.norm(point - self.tx, axis=1)
            + np.linalg.norm(point - self.rx, axis=1)
            - self.length
        )
        return np.maximum(d, 0.0)


def max_excess_path_length(grid: Grid, link: LinkGeometry) -> float:
    """Largest excess path length over the in-area pixels (out-of-area excluded)."""
    if grid.n_pixels == 0:
        raise ConfigError("grid has no in-area pixels")
    return float(excess_path_lengths(grid.coordinates, link).max())


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, c, tol: float = 1e-12) -> bool:
    # c is assumed collinear with a-b; check it lies within the bounding box.
    return (
        min(a[0], b[0]) - tol <= c[0] <= max(a[0], b[0]) + tol
        and min(a[1], b[1]) - tol <= c[1] <= max(a[1], b[1]) + tol
    )


def _segments_intersect(p, q, a, b) -> bool:
    """Inclusive 2D segment intersection: touching endpoints count."""
    d1 = _orient(a, b, p)
    d2 = _orient(a, b, q)
    d3 = _orient(p, q, a)
    d4 = _orient(p, q, b)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
        (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
    ):
        return True
    if d1 == 0 and _on_segment(a, b, p):
        return True
    if d2 == 0 and _on_segment(a, b, q):
        return True
    if d3 == 0 and _on_segment(p, q, a):
        return True
    if d4 == 0 and _on_segment(p, q, b):
        return True
    return False


def segment_intersects_wall(p: np.ndarray, q: np.ndarray, walls: WallSet) -> bool:
    """True iff segment p-q crosses (or touches) any wall segment.

    Touching counts as blocked: movement that grazes a wall is treated
    conservatively as passing through it.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    for seg in walls.segments:
        if _segments_intersect(p, q, seg[0], seg[1]):
            return True
    return False


def neighbors(
    grid: Grid,
    walls: WallSet,
    max_step: float = 0.75,
    ignore_walls: bool = False,
) -> list[np.ndarray]:
    """Adjacency lists over pixel indices 0..P (P = out-of-area pixel).

    In-area pixels are neighbors when within ``max_step`` of each other and
    the straight line between them is not blocked by a wall. Entrance-exit
    pixels additionally neighbor the out-of-area pixel, which in turn lists
    exactly the entrance-exit pixels.

    With ``ignore_walls`` both the wall test and the entrance-exit
    restriction are dropped: every in-area pixel then connects to the
    out-of-area pixel.
    """
    if not max_step > 0:
        raise ConfigError("max_step must be positive")
    coords = grid.coordinates
    n = grid.n_pixels
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    close = (dist > 0) & (dist <= max_step)

    adjacency: list[list[int]] = [[] for _ in range(n + 1)]
    for k, w in zip(*np.nonzero(np.triu(close, k=1))):
        k, w = int(k), int(w)
        if not ignore_walls and len(walls) and segment_intersects_wall(coords[k], coords[w], walls):
            continue
        adjacency[k].append(w)
        adjacency[w].append(k)

    exits = np.arange(n) if ignore_walls else np.nonzero(grid.entrance_mask)[0]
    for k in exits:
        adjacency[int(k)].append(n)
        adjacency[n].append(int(k))

    return [np.array(sorted(a), dtype=int) for a in adjacency]


def build_grid(
    bounds: tuple[float, float, float, float],
    spacing: float,
    walls: WallSet,
    entrances: list[np.ndarray],
) -> Grid:
    """Regular lattice of in-area pixels over rectangular bounds.

    ``bounds`` is (xmin, ymin, xmax, ymax). The lattice is anchored at the
    lower-left corner. The pixel nearest each declared entrance coordinate
    gets the entrance-exit flag. When no entrances are declared and there
    are no walls, every boundary pixel of the lattice is flagged (an open
    area can be left anywhere); with walls present, entrances must be
    declared explicitly.
    """
    xmin, ymin, xmax, ymax = map(float, bounds)
    if not (xmax > xmin and ymax > ymin):
        raise ConfigError("grid bounds are degenerate")
    if not spacing > 0:
        raise ConfigError("grid spacing must be positive")
    if spacing > (xmax - xmin) or spacing > (ymax - ymin):
        raise ConfigError("grid spacing larger than the bounded area")

    nx = int(np.floor((xmax - xmin) / spacing + _COORD_EQ_TOL)) + 1
    ny = int(np.floor((ymax - ymin) / spacing + _COORD_EQ_TOL)) + 1
    xs = xmin + spacing * np.arange(nx)
    ys = ymin + spacing * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys)
    coords = np.column_stack([gx.ravel(), gy.ravel()])

    mask = np.zeros(coords.shape[0], dtype=bool)
    if entrances:
        for e in entrances:
            e = np.asarray(e, dtype=float)
            mask[int(np.argmin(((coords - e) ** 2).sum(axis=1)))] = True
    elif len(walls):
        raise ConfigError("walls present but no entrance coordinates declared")
    else:
        ix = np.tile(np.arange(nx), ny)
        iy = np.repeat(np.arange(ny), nx)
        mask = (ix == 0) | (ix == nx - 1) | (iy == 0) | (iy == ny - 1)

    return Grid(coordinates=coords, spacing=spacing, entrance_mask=mask)


def lattice_difference_pairs(grid: Grid) -> np.ndarray:
    """Index pairs of lattice-adjacent in-area pixels, shape (m, 2).

    Recovered from coordinates (pairs at exactly one grid spacing apart) so
    it works for any grid, not just ones produced by build_grid.
    """
    coords = grid.coordinates
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    close = np.abs(dist - grid.spacing) <= 1e-6 * grid.spacing
    k, w = np.nonzero(np.triu(close, k=1))
    return np.column_stack([k, w]).astype(int)
