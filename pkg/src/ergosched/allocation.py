"""Grid path planning and expansion of a task choice into concrete entities.

Movement is 4-connected with unit cost per cell. Ties in the priority queue
break on (row, col), so paths are deterministic. ``allocate`` turns a
planner-level task choice into an assignment of the nearest idle,
fatigue-feasible human (and nearest idle robot where the task needs one).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

from .estimation import WAIT

_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class PathResult:
    path: tuple  # cell sequence including both endpoints; empty if unreachable
    cost: int  # cells traversed; -1 if unreachable

    @property
    def reachable(self) -> bool:
        return self.cost >= 0


NO_PATH = PathResult(path=(), cost=-1)


class AllocationUnavailable(Exception):
    """No idle, feasible entity can take the task right now."""


def shortest_path(grid, start: tuple[int, int], goal: tuple[int, int]) -> PathResult:
    """Minimal 4-connected path between two free cells (Dijkstra).

    Deterministic tie-break: the queue orders equal-cost frontier cells by
    row then column. Unreachable goals yield ``NO_PATH``.
    """
    if not grid.is_free(start):
        raise ValueError(f"start cell {start} is not free")
    if not grid.is_free(goal):
        raise ValueError(f"goal cell {goal} is not free")
    if start == goal:
        return PathResult(path=(start,), cost=0)

    dist = {start: 0}
    parent = {}
    queue = [(0, start)]
    while queue:
        d, cell = heapq.heappop(queue)
        if cell == goal:
            break
        if d > dist.get(cell, float("inf")):
            continue
        r, c = cell
        for dr, dc in _STEPS:
            nxt = (r + dr, c + dc)
            if not grid.is_free(nxt):
                continue
            nd = d + 1
            if nd < dist.get(nxt, float("inf")):
                dist[nxt] = nd
                parent[nxt] = cell
                heapq.heappush(queue, (nd, nxt))
    if goal not in dist:
        return NO_PATH
    path = [goal]
    while path[-1] != start:
        path.append(parent[path[-1]])
    path.reverse()
    return PathResult(path=tuple(path), cost=len(path) - 1)


@dataclass(frozen=True)
class ExpandedAction:
    task: str
    human: int | None = None
    robot: int | None = None
    human_travel: int = 0
    robot_travel: int = 0


def allocate(task_id: str, safe_sets, world, grid) -> ExpandedAction:
    """Pick the nearest idle feasible entities for a task.

    Humans are drawn from the task's fatigue-feasible set, robots from the
    idle pool; both minimize path cost to the task's first subtask location
    needing them, with lower entity index breaking ties. Raises
    ``AllocationUnavailable`` when no eligible entity is free (the planner
    treats that as WAIT).
    """
    if task_id == WAIT:
        raise ValueError("WAIT cannot be expanded into an assignment")
    scenario = world.scenario
    task = scenario.task(task_id)
    performers = [scenario.subtask(sid).performer for sid in task.subtask_ids]
    needs_human = any("human" in p for p in performers)
    needs_robot = any("robot" in p for p in performers)

    human_goal = next(
        (
            scenario.subtask(sid).location
            for sid in task.subtask_ids
            if "human" in scenario.subtask(sid).performer
        ),
        None,
    )
    robot_goal = next(
        (
            scenario.subtask(sid).location
            for sid in task.subtask_ids
            if "robot" in scenario.subtask(sid).performer
        ),
        None,
    )

    human = robot = None
    human_travel = robot_travel = 0
    if needs_human:
        best = None
        for k in world.idle_humans():
            if task_id not in safe_sets.e_safe[k]:
                continue
            result = shortest_path(grid, world.humans[k].position, human_goal)
            if not result.reachable:
                continue
            if best is None or result.cost < best[0]:
                best = (result.cost, k)
        if best is None:
            raise AllocationUnavailable(f"no idle feasible human for {task_id}")
        human_travel, human = best
    if needs_robot:
        best = None
        for i in world.idle_robots():
            result = shortest_path(grid, world.robots[i].position, robot_goal)
            if not result.reachable:
                continue
            if best is None or result.cost < best[0]:
                best = (result.cost, i)
        if best is None:
            raise AllocationUnavailable(f"no idle robot for {task_id}")
        robot_travel, robot = best
    return ExpandedAction(
        task=task_id,
        human=human,
        robot=robot,
        human_travel=human_travel,
        robot_travel=robot_travel,
    )
