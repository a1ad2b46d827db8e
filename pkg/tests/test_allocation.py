from collections import deque

import numpy as np
import pytest

from ergosched.allocation import (
    NO_PATH,
    AllocationUnavailable,
    allocate,
    shortest_path,
)
from ergosched.estimation import EstimatorBank, SafeSets, build_safe_sets
from ergosched.fatigue import NoiseConfig
from ergosched.scenario import EpisodeInit, GridMap, HumanInit, default_scenario
from ergosched import env as E


def grid_from_rows(rows):
    occ = tuple(ch == "#" for row in rows for ch in row)
    return GridMap(width=len(rows[0]), height=len(rows), occupancy=occ)


def bfs_distance(grid, start, goal):
    # Brute-force oracle for the Dijkstra implementation.
    if start == goal:
        return 0
    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        (r, c), d = queue.popleft()
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if (nr, nc) == goal:
                return d + 1
            if grid.is_free((nr, nc)) and (nr, nc) not in seen:
                seen.add((nr, nc))
                queue.append(((nr, nc), d + 1))
    return None


class TestShortestPath:
    def test_same_cell(self):
        grid = grid_from_rows(["...", "...", "..."])
        result = shortest_path(grid, (1, 1), (1, 1))
        assert result.path == ((1, 1),)
        assert result.cost == 0

    def test_empty_3x3_corner_to_corner(self):
        grid = grid_from_rows(["...", "...", "..."])
        assert shortest_path(grid, (0, 0), (2, 2)).cost == 4

    def test_center_obstacle_still_cost_4(self):
        grid = grid_from_rows(["...", ".#.", "..."])
        result = shortest_path(grid, (0, 0), (2, 2))
        assert result.cost == 4
        assert (1, 1) not in result.path

    def test_unreachable(self):
        grid = grid_from_rows(["..#.", "..#.", "..#."])
        assert shortest_path(grid, (0, 0), (0, 3)) is NO_PATH

    def test_path_is_valid_walk(self):
        grid = grid_from_rows(["....", ".##.", "....", "...."])
        result = shortest_path(grid, (0, 0), (2, 3))
        for a, b in zip(result.path, result.path[1:]):
            assert abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1
            assert grid.is_free(b)
        assert result.cost == len(result.path) - 1

    def test_matches_bfs_on_random_grids(self):
        rng = np.random.default_rng(7)
        for trial in range(60):
            h, w = int(rng.integers(3, 13)), int(rng.integers(3, 13))
            rows = [
                "".join("#" if rng.random() < 0.25 else "." for _ in range(w))
                for _ in range(h)
            ]
            grid = grid_from_rows(rows)
            free = grid.free_cells()
            if len(free) < 2:
                continue
            idx = rng.choice(len(free), size=2, replace=False)
            start, goal = free[idx[0]], free[idx[1]]
            expected = bfs_distance(grid, start, goal)
            result = shortest_path(grid, start, goal)
            assert result.cost == (expected if expected is not None else -1)


class TestAllocate:
    def setup_method(self):
        self.scn = default_scenario()
        self.noise = NoiseConfig()

    def world_with(self, human_cells, robot_cells, seed=0):
        init = EpisodeInit(
            humans=tuple(HumanInit("normal", 1.0, c) for c in human_cells),
            robot_positions=tuple(robot_cells),
            cage_positions=((9, 0),),
            seed=seed,
        )
        world = E.reset(self.scn, init, E.RewardConfig(), seed, noise=self.noise)
        bank = EstimatorBank(self.scn, init, self.noise, seed=seed)
        return world, bank

    def test_single_idle_human(self):
        world, bank = self.world_with([(0, 0)], [(11, 0)])
        sets = build_safe_sets(self.scn, ["t0"], bank, [0.0], world.limits)
        action = allocate("t0", sets, world, self.scn.grid)
        assert action.task == "t0"
        assert action.human == 0

    def test_nearest_of_two(self):
        # s00 is at (2, 2); human 1 is much closer.
        world, bank = self.world_with([(0, 15), (2, 3)], [(11, 0)])
        sets = build_safe_sets(self.scn, ["t0"], bank, [0.0, 0.0], world.limits)
        action = allocate("t0", sets, world, self.scn.grid)
        assert action.human == 1
        assert action.human_travel == 1

    def test_nearest_unsafe_gives_way_to_farther_safe(self):
        world, bank = self.world_with([(2, 3), (0, 15)], [(11, 0)])
        sets = SafeSets(e_safe=((), ("t0",)), a_safe=("t0", "WAIT"))
        action = allocate("t0", sets, world, self.scn.grid)
        assert action.human == 1

    def test_no_idle_feasible_human(self):
        world, bank = self.world_with([(2, 3)], [(11, 0)])
        sets = SafeSets(e_safe=((),), a_safe=("WAIT",))
        with pytest.raises(AllocationUnavailable):
            allocate("t0", sets, world, self.scn.grid)

    def test_robot_assignment_for_collaborative_task(self):
        world, bank = self.world_with([(10, 10)], [(11, 14), (10, 12)])
        sets = build_safe_sets(self.scn, ["t7"], bank, [0.0], world.limits)
        action = allocate("t7", sets, world, self.scn.grid)
        assert action.robot == 1  # (10, 12) is nearer to s09 at (10, 13)

    def test_allocated_human_always_feasible(self):
        rng = np.random.default_rng(3)
        free = self.scn.grid.free_cells()
        for _ in range(25):
            cells = [free[int(i)] for i in rng.choice(len(free), 3, replace=False)]
            world, bank = self.world_with(cells[:2], [cells[2]], seed=int(rng.integers(1e6)))
            fatigue = [float(rng.uniform(0, 0.9)) for _ in range(2)]
            sets = build_safe_sets(self.scn, ["t1"], bank, fatigue, world.limits)
            try:
                action = allocate("t1", sets, world, self.scn.grid)
            except AllocationUnavailable:
                continue
            assert "t1" in sets.e_safe[action.human]
