import numpy as np
import pytest

from cableplan import global_planner as gp
from cableplan.geometry import contains, make_cuboid
from cableplan.planner import PlanConfig


def empty_grid(shape=(10, 10, 10), resolution=0.2):
    return gp.GridMap(resolution=resolution, origin=np.zeros(3),
                      occupancy=np.zeros(shape, dtype=bool), inflation=0.0)


# --- rasterize ---------------------------------------------------------------

def test_rasterize_empty_environment():
    grid = gp.rasterize([], (np.zeros(3), np.ones(3) * 2), 0.2, 0.1)
    assert not grid.occupancy.any()
    assert grid.shape == (10, 10, 10)


def test_rasterize_unit_cube_cell_count():
    obs = make_cuboid((0.5, 0.5, 0.5), (1.0, 1.0, 1.0))
    grid = gp.rasterize([obs], (np.zeros(3), np.ones(3) * 2), 0.1, 0.0)
    count = int(grid.occupancy.sum())
    assert 900 <= count <= 1100    # ~1000 cells of a 1 m^3 body at 0.1 m


def test_rasterize_inflation_is_a_ball():
    # a point-like obstacle inflated by 0.5 occupies a ball, not a cube:
    # corner cells at L2 distance > 0.5 stay free
    obs = make_cuboid((0.01, 0.01, 0.01), (1.0, 1.0, 1.0))
    grid = gp.rasterize([obs], (np.zeros(3), np.ones(3) * 2), 0.1, 0.5)
    occupied = np.argwhere(grid.occupancy)
    centers = grid.origin + (occupied + 0.5) * grid.resolution
    dist = np.linalg.norm(centers - 1.0, axis=1)
    assert dist.max() <= 0.5 + 0.02 + grid.resolution * np.sqrt(3) / 2
    # strictly smaller than the enclosing cube of half-width 0.5
    corner = grid.point_to_cell((1.45, 1.45, 1.45))
    assert grid.is_free(corner)


def test_rasterize_cell_budget():
    with pytest.raises(gp.PlanningGridError):
        gp.rasterize([], (np.zeros(3), np.ones(3) * 100), 0.01, 0.0)


# --- A* -----------------------------------------------------------------------

def test_astar_start_equals_goal():
    grid = empty_grid()
    path = gp.astar(grid, (2, 2, 2), (2, 2, 2))
    assert path.reachable
    assert path.waypoints.shape == (1, 3)
    assert path.cost == 0.0


def test_astar_straight_corridor():
    grid = gp.GridMap(resolution=0.5, origin=np.zeros(3),
                      occupancy=np.zeros((10, 1, 1), dtype=bool), inflation=0.0)
    path = gp.astar(grid, (0, 0, 0), (9, 0, 0))
    assert path.reachable
    assert path.cost == pytest.approx(9 * 0.5)
    assert path.step_counts == (9, 0, 0)


def test_astar_rejects_occupied_endpoints():
    grid = empty_grid()
    grid.occupancy[1, 1, 1] = True
    with pytest.raises(gp.PlanningGridError):
        gp.astar(grid, (1, 1, 1), (5, 5, 5))


def test_astar_unreachable():
    grid = empty_grid((7, 7, 1))
    grid.occupancy[3, :, :] = True   # full wall
    path = gp.astar(grid, (0, 0, 0), (6, 0, 0))
    assert not path.reachable


def test_astar_through_opening_matches_dijkstra():
    grid = empty_grid((9, 9, 3))
    grid.occupancy[4, :, :] = True
    grid.occupancy[4, 7, 1] = False   # one opening
    path = gp.astar(grid, (0, 0, 0), (8, 0, 0))
    assert path.reachable
    ref = gp.dijkstra_cost(grid, (0, 0, 0), (8, 0, 0))
    assert path.cost == ref           # exact equality by counts bookkeeping


def test_astar_dijkstra_equivalence_random(rng):
    for trial in range(10):
        shape = tuple(rng.integers(5, 12, size=3))
        occ = rng.random(shape) < 0.25
        occ[0, 0, 0] = False
        occ[-1, -1, -1] = False
        grid = gp.GridMap(resolution=0.3, origin=np.zeros(3),
                          occupancy=occ, inflation=0.0)
        goal = tuple(np.array(shape) - 1)
        path = gp.astar(grid, (0, 0, 0), goal)
        ref = gp.dijkstra_cost(grid, (0, 0, 0), goal)
        if path.reachable:
            assert path.cost == ref
        else:
            assert ref == np.inf


def test_heuristic_admissible(rng):
    # Euclidean straight-line distance never exceeds the realized path cost
    grid = empty_grid((8, 8, 8), resolution=0.25)
    for _ in range(10):
        a = tuple(rng.integers(0, 8, size=3))
        b = tuple(rng.integers(0, 8, size=3))
        path = gp.astar(grid, a, b)
        h = np.linalg.norm((np.array(b) - np.array(a)) * 0.25)
        assert h <= path.cost + 1e-12


# --- reference construction -----------------------------------------------------

def _cfg(**kw):
    return PlanConfig(horizon=10, dt=0.2, **kw)


def test_reference_single_waypoint():
    path = gp.WaypointPath(waypoints=np.array([[1.0, 2.0, 3.0]]),
                           cost=0.0, step_counts=(0, 0, 0))
    ref = gp.make_reference(path, np.array([1.0, 0, 0, 0]), _cfg())
    assert ref.positions.shape == (11, 3)
    assert np.allclose(ref.positions, [1.0, 2.0, 3.0])
    assert ref.source == "global-path"


def test_reference_spacing_respects_speed_limit():
    wpts = np.column_stack([np.linspace(0, 5, 26), np.zeros(26), np.ones(26)])
    path = gp.WaypointPath(waypoints=wpts, cost=5.0, step_counts=(25, 0, 0))
    cfg = _cfg(max_velocity=2.0)
    ref = gp.make_reference(path, np.array([1.0, 0, 0, 0]), cfg)
    gaps = np.linalg.norm(np.diff(ref.positions, axis=0), axis=1)
    assert gaps.max() <= 2.0 * 0.2 + 1e-9


def test_reference_slides_from_position():
    wpts = np.column_stack([np.linspace(0, 5, 26), np.zeros(26), np.ones(26)])
    path = gp.WaypointPath(waypoints=wpts, cost=5.0, step_counts=(25, 0, 0))
    ref = gp.make_reference(path, np.array([1.0, 0, 0, 0]), _cfg(),
                            from_position=np.array([2.5, 0.3, 1.0]))
    assert ref.positions[0, 0] == pytest.approx(2.5, abs=1e-9)


def test_reference_avoids_inflated_obstacles(rng):
    # L-shaped passage: sampled references stay outside the inflated boxes
    obs = [make_cuboid((0.5, 1.2, 1.0), (2.0, 0.6, 1.0))]
    world = (np.array([0.0, -1.0, 0.0]), np.array([4.0, 3.0, 2.0]))
    grid = gp.rasterize(obs, world, 0.2, 0.4)
    start = gp.nearest_free_cell(grid, (0.5, 0.2, 1.0))
    goal = gp.nearest_free_cell(grid, (3.5, 0.2, 1.0))
    path = gp.astar(grid, start, goal)
    assert path.reachable
    ref = gp.make_reference(path, np.array([1.0, 0, 0, 0]), _cfg())
    for obs_poly in obs:
        inflated = obs_poly.inflate(0.4 - 1e-6)
        assert not contains(inflated, ref.positions).any()


def test_nearest_free_cell():
    grid = empty_grid()
    grid.occupancy[5, 5, 5] = True
    cell = gp.nearest_free_cell(grid, grid.cell_center((5, 5, 5)))
    assert grid.is_free(cell)
    assert max(abs(np.array(cell) - 5)) == 1
