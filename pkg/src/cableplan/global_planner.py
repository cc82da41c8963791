"""Coarse A* reference paths for the payload position.

The environment is rasterized into a 3D occupancy grid; cells whose
centers lie within (obstacle + inflation ball) are occupied, with the
inflation sized so a path of cell centers is nominally trackable by the
payload regardless of its orientation. Path costs over the 26-connected
lattice are integer combinations a + b*sqrt(2) + c*sqrt(3) of the
resolution, tracked as exact counts so equal-cost searches (A*, Dijkstra)
report bitwise-identical totals.
"""
import heapq
from dataclasses import dataclass

import numpy as np

from .geometry import min_norm_point

SQRT2 = np.sqrt(2.0)
SQRT3 = np.sqrt(3.0)


class PlanningGridError(ValueError):
    pass


@dataclass
class GridMap:
    resolution: float
    origin: np.ndarray              # min corner of cell (0,0,0)
    occupancy: np.ndarray           # bool (nx, ny, nz), True = blocked
    inflation: float

    @property
    def shape(self):
        return self.occupancy.shape

    def cell_center(self, cell):
        return self.origin + (np.asarray(cell, dtype=float) + 0.5) * self.resolution

    def point_to_cell(self, point):
        c = np.floor((np.asarray(point, dtype=float) - self.origin) / self.resolution).astype(int)
        return tuple(np.clip(c, 0, np.array(self.shape) - 1))

    def is_free(self, cell):
        return not self.occupancy[cell]


@dataclass
class WaypointPath:
    waypoints: np.ndarray           # (k, 3) cell centers, start to goal
    cost: float                     # exact canonical a + b*sqrt2 + c*sqrt3 times resolution
    step_counts: tuple              # (axis, face-diagonal, corner-diagonal) moves
    reachable: bool = True

    @staticmethod
    def unreachable():
        return WaypointPath(waypoints=np.zeros((0, 3)), cost=np.inf,
                            step_counts=(0, 0, 0), reachable=False)


def canonical_cost(counts, resolution):
    """Float path cost computed in a fixed expression order so equal count
    triples always produce identical floats."""
    a, b, c = counts
    return (a + b * SQRT2 + c * SQRT3) * resolution


def rasterize(obstacles, world_bounds, resolution, inflation, max_cells=2_000_000):
    """Occupancy grid over the world box: a cell is blocked iff its center
    is within ``inflation`` of some obstacle (exact Minkowski ball test)."""
    if resolution <= 0.0:
        raise PlanningGridError("resolution must be positive")
    lo = np.asarray(world_bounds[0], dtype=float)
    hi = np.asarray(world_bounds[1], dtype=float)
    dims = np.maximum(np.ceil((hi - lo) / resolution).astype(int), 1)
    if int(np.prod(dims)) > max_cells:
        raise PlanningGridError(
            f"grid of {np.prod(dims)} cells exceeds the {max_cells} cell budget")
    occ = np.zeros(tuple(dims), dtype=bool)
    axes = [lo[d] + (np.arange(dims[d]) + 0.5) * resolution for d in range(3)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    for obs in obstacles:
        # cheap superset: offset halfspace check, then the exact ball test
        row_norms = np.linalg.norm(obs.A, axis=1)
        margin = inflation + 0.5 * resolution * np.sqrt(3.0)
        cand = np.all(centers @ obs.A.T <= obs.B + margin * row_norms + 1e-12, axis=1)
        idx = np.nonzero(cand)[0]
        if idx.size == 0:
            continue
        V = obs.vertices()
        hits = []
        for i in idx:
            x, _ = min_norm_point(V - centers[i])
            if float(x @ x) <= inflation ** 2 + 1e-12:
                hits.append(i)
        occ.reshape(-1)[hits] = True
    return GridMap(resolution=float(resolution), origin=lo, occupancy=occ,
                   inflation=float(inflation))


_NEIGHBORS = [(dx, dy, dz)
              for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
              if (dx, dy, dz) != (0, 0, 0)]
_MOVE_KIND = {n: abs(n[0]) + abs(n[1]) + abs(n[2]) - 1 for n in _NEIGHBORS}


def astar(grid, start, goal):
    """Cost-optimal 26-connected path with Euclidean edge costs and an
    admissible Euclidean heuristic; lexicographic cell-index tie-breaking.

    ``start``/``goal`` are cell index triples and must be free.
    """
    start = tuple(int(v) for v in start)
    goal = tuple(int(v) for v in goal)
    for name, cell in (("start", start), ("goal", goal)):
        if not all(0 <= cell[d] < grid.shape[d] for d in range(3)):
            raise PlanningGridError(f"{name} cell {cell} outside the grid")
        if not grid.is_free(cell):
            raise PlanningGridError(f"{name} cell {cell} is occupied")
    res = grid.resolution
    goal_arr = np.asarray(goal, dtype=float)

    def heuristic(cell):
        d = (np.asarray(cell, dtype=float) - goal_arr) * res
        return float(np.sqrt(d @ d))

    best = {start: (0, 0, 0)}
    parent = {start: None}
    closed = set()
    h0 = heuristic(start)
    heap = [(h0, start, (0, 0, 0))]
    found = False
    while heap:
        f, cell, counts = heapq.heappop(heap)
        if cell in closed:
            continue
        closed.add(cell)
        if cell == goal:
            found = True
            break
        g_here = canonical_cost(counts, res)
        for move in _NEIGHBORS:
            nxt = (cell[0] + move[0], cell[1] + move[1], cell[2] + move[2])
            if not all(0 <= nxt[d] < grid.shape[d] for d in range(3)):
                continue
            if nxt in closed or not grid.is_free(nxt):
                continue
            kind = _MOVE_KIND[move]
            ncounts = tuple(counts[i] + (1 if i == kind else 0) for i in range(3))
            ng = canonical_cost(ncounts, res)
            if nxt in best and canonical_cost(best[nxt], res) <= ng:
                continue
            best[nxt] = ncounts
            parent[nxt] = cell
            heapq.heappush(heap, (ng + heuristic(nxt), nxt, ncounts))
    if not found:
        return WaypointPath.unreachable()
    cells = []
    c = goal
    while c is not None:
        cells.append(c)
        c = parent[c]
    cells.reverse()
    counts = best[goal]
    return WaypointPath(
        waypoints=np.array([grid.cell_center(c) for c in cells]),
        cost=canonical_cost(counts, res),
        step_counts=counts,
    )


def dijkstra_cost(grid, start, goal):
    """Exhaustive uniform-cost search; shares only the cost bookkeeping with
    A*. Used as the optimality oracle on small grids."""
    start = tuple(int(v) for v in start)
    goal = tuple(int(v) for v in goal)
    res = grid.resolution
    best = {start: (0, 0, 0)}
    closed = set()
    heap = [(0.0, start, (0, 0, 0))]
    while heap:
        g, cell, counts = heapq.heappop(heap)
        if cell in closed:
            continue
        closed.add(cell)
        if cell == goal:
            return canonical_cost(counts, res)
        for move in _NEIGHBORS:
            nxt = (cell[0] + move[0], cell[1] + move[1], cell[2] + move[2])
            if not all(0 <= nxt[d] < grid.shape[d] for d in range(3)):
                continue
            if nxt in closed or not grid.is_free(nxt):
                continue
            kind = _MOVE_KIND[move]
            ncounts = tuple(counts[i] + (1 if i == kind else 0) for i in range(3))
            ng = canonical_cost(ncounts, res)
            if nxt in best and canonical_cost(best[nxt], res) <= ng:
                continue
            best[nxt] = ncounts
            heapq.heappush(heap, (ng, nxt, ncounts))
    return np.inf


def nearest_free_cell(grid, point, max_radius=20):
    """Closest free cell to a point, searching outward ring by ring."""
    base = grid.point_to_cell(point)
    if grid.is_free(base):
        return base
    for r in range(1, max_radius + 1):
        candidates = []
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                for dz in range(-r, r + 1):
                    if max(abs(dx), abs(dy), abs(dz)) != r:
                        continue
                    c = (base[0] + dx, base[1] + dy, base[2] + dz)
                    if all(0 <= c[d] < grid.shape[d] for d in range(3)) and grid.is_free(c):
                        candidates.append(c)
        if candidates:
            pt = np.asarray(point, dtype=float)
            return min(candidates,
                       key=lambda c: (float(np.sum((grid.cell_center(c) - pt) ** 2)), c))
    raise PlanningGridError(f"no free cell within {max_radius} rings of {point}")


def resample_by_arclength(waypoints, spacing, start_from=None):
    """Stations along a polyline at most ``spacing`` apart, beginning at the
    arc-length point closest to ``start_from`` (path start by default)."""
    W = np.asarray(waypoints, dtype=float)
    if W.shape[0] == 1:
        return W.copy(), np.zeros(1)
    seg = np.diff(W, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s0 = 0.0
    if start_from is not None:
        p = np.asarray(start_from, dtype=float)
        best_d, best_s = np.inf, 0.0
        for i in range(seg.shape[0]):
            if seg_len[i] < 1e-12:
                continue
            t = np.clip((p - W[i]) @ seg[i] / seg_len[i] ** 2, 0.0, 1.0)
            proj = W[i] + t * seg[i]
            d = float(np.sum((p - proj) ** 2))
            if d < best_d:
                best_d, best_s = d, cum[i] + t * seg_len[i]
        s0 = best_s
    stations = np.arange(s0, cum[-1], spacing)
    stations = np.concatenate([stations, [cum[-1]]])
    pts = np.empty((stations.size, 3))
    for k, s in enumerate(stations):
        i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, seg.shape[0] - 1))
        t = (s - cum[i]) / seg_len[i] if seg_len[i] > 1e-12 else 0.0
        pts[k] = W[i] + t * seg[i]
    return pts, stations


def make_reference(path, goal_orientation, config, from_position=None):
    """Per-knot pose references along a waypoint path.

    Positions advance along the path by arc length at the velocity-limit
    spacing; the orientation reference is the goal orientation at every
    knot and twist references are zero.
    """
    from .planner import Reference
    if not path.reachable or path.waypoints.shape[0] == 0:
        raise PlanningGridError("cannot build a reference from an unreachable path")
    q_goal = np.asarray(goal_orientation, dtype=float)
    n_knots = config.horizon + 1
    spacing = config.max_velocity * config.dt
    pts, _ = resample_by_arclength(path.waypoints, spacing, start_from=from_position)
    if pts.shape[0] >= n_knots:
        positions = pts[:n_knots]
    else:
        pad = np.repeat(pts[-1][None, :], n_knots - pts.shape[0], axis=0)
        positions = np.vstack([pts, pad])
    quats = np.repeat(q_goal[None, :], n_knots, axis=0)
    return Reference(positions=positions, quaternions=quats, source="global-path")
