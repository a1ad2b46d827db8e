"""Declarative production scenarios: tasks, subtasks, grid, fatigue tables.

A scenario is loaded from a small line-oriented text format (see
``parse_scenario``) and validated structurally: the task dependency graph
must be acyclic, every referenced subtask must exist, every subtask a human
can perform needs a fatigue-accumulation entry, and all work locations and
spawn regions must sit on free grid cells.

``randomize_episode`` derives the per-episode variability: how many humans
and robots show up, each human's fatigue-sensitivity type, and where
everyone (including material cages) starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

PERFORMERS = ("human", "robot", "human+robot", "machine")
REST_MODES = ("free", "waiting", "walking")
HUMAN_TYPES = {"weak": 1.2, "normal": 1.0, "strong": 0.8}

_SECTIONS = ("tasks", "subtasks", "deps", "fatigue", "grid", "order")
_ORDER_KEYS = (
    "products",
    "humans",
    "robots",
    "cages",
    "human_spawn",
    "robot_spawn",
    "cage_spawn",
)


class ScenarioError(ValueError):
    """Malformed or structurally invalid scenario description."""


@dataclass(frozen=True)
class GridMap:
    width: int
    height: int
    occupancy: tuple  # row-major tuple of bools, True = obstacle

    def is_free(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        if not (0 <= r < self.height and 0 <= c < self.width):
            return False
        return not self.occupancy[r * self.width + c]

    def free_cells(self) -> list[tuple[int, int]]:
        return [
            (r, c)
            for r in range(self.height)
            for c in range(self.width)
            if not self.occupancy[r * self.width + c]
        ]


@dataclass(frozen=True)
class SubtaskDef:
    id: str
    name: str
    performer: str
    static_time: int
    location: tuple[int, int]


@dataclass(frozen=True)
class TaskDef:
    id: str
    name: str
    subtask_ids: tuple


@dataclass(frozen=True)
class FatigueTable:
    work_rate: dict  # subtask id -> accumulation rate per tick
    recovery_rate: dict  # rest mode -> recovery rate per tick
    delta_eff: float
    human_type_multipliers: dict = field(
        default_factory=lambda: dict(HUMAN_TYPES)
    )


@dataclass(frozen=True)
class EntityPool:
    human_range: tuple[int, int] = (1, 3)
    robot_range: tuple[int, int] = (1, 3)
    cage_count: int = 2
    human_spawn: tuple | None = None  # (r0, c0, r1, c1) inclusive, None = any free cell
    robot_spawn: tuple | None = None
    cage_spawn: tuple | None = None


@dataclass(frozen=True)
class Scenario:
    tasks: tuple
    subtasks: tuple
    dependency_edges: tuple
    grid: GridMap
    fatigue_table: FatigueTable
    entity_pool: EntityPool
    product_order: int

    def subtask(self, sid: str) -> SubtaskDef:
        return self._subtask_index[sid]

    def task(self, tid: str) -> TaskDef:
        return self._task_index[tid]

    @property
    def _subtask_index(self):
        return {s.id: s for s in self.subtasks}

    @property
    def _task_index(self):
        return {t.id: t for t in self.tasks}

    def human_subtask_ids(self) -> list[str]:
        return [s.id for s in self.subtasks if "human" in s.performer]

    def predecessors(self, tid: str) -> list[str]:
        return [a for (a, b) in self.dependency_edges if b == tid]

    def machine_locations(self) -> list[tuple[int, int]]:
        seen = []
        for s in self.subtasks:
            if s.performer == "machine" and s.location not in seen:
                seen.append(s.location)
        return seen


@dataclass(frozen=True)
class HumanInit:
    type_name: str
    type_multiplier: float
    position: tuple[int, int]


@dataclass(frozen=True)
class EpisodeInit:
    humans: tuple  # of HumanInit
    robot_positions: tuple
    cage_positions: tuple
    seed: int

    def work_rate(self, scenario: Scenario, human_idx: int, subtask_id: str) -> float:
        """Ground-truth accumulation rate for one human on one subtask."""
        base = scenario.fatigue_table.work_rate[subtask_id]
        return base * self.humans[human_idx].type_multiplier


def _topological_order(task_ids, edges):
    indeg = {t: 0 for t in task_ids}
    succ = {t: [] for t in task_ids}
    for a, b in edges:
        indeg[b] += 1
        succ[a].append(b)
    ready = [t for t in task_ids if indeg[t] == 0]
    order = []
    while ready:
        t = ready.pop()
        order.append(t)
        for nxt in succ[t]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                ready.append(nxt)
    return order


def validate_scenario(s: Scenario) -> Scenario:
    sub_ids = {st.id for st in s.subtasks}
    if len(sub_ids) != len(s.subtasks):
        raise ScenarioError("duplicate subtask ids")
    task_ids = [t.id for t in s.tasks]
    if len(set(task_ids)) != len(task_ids):
        raise ScenarioError("duplicate task ids")

    for st in s.subtasks:
        if st.performer not in PERFORMERS:
            raise ScenarioError(f"subtask {st.id}: unknown performer {st.performer!r}")
        if st.static_time < 1:
            raise ScenarioError(f"subtask {st.id}: static time must be >= 1")
        if not s.grid.is_free(st.location):
            raise ScenarioError(f"subtask {st.id}: location {st.location} is not a free cell")
        if "human" in st.performer and st.id not in s.fatigue_table.work_rate:
            raise ScenarioError(f"subtask {st.id}: no fatigue accumulation entry")

    for t in s.tasks:
        for sid in t.subtask_ids:
            if sid not in sub_ids:
                raise ScenarioError(f"task {t.id}: unknown subtask {sid!r}")

    for a, b in s.dependency_edges:
        for end in (a, b):
            if end not in set(task_ids):
                raise ScenarioError(f"dependency edge references unknown task {end!r}")
    if len(_topological_order(task_ids, s.dependency_edges)) != len(task_ids):
        raise ScenarioError("task dependency graph contains a cycle")

    for rate_name, table in (
        ("work", s.fatigue_table.work_rate),
        ("recovery", s.fatigue_table.recovery_rate),
    ):
        for key, value in table.items():
            if value <= 0:
                raise ScenarioError(f"{rate_name} rate for {key!r} must be > 0")
    for mode in REST_MODES:
        if mode not in s.fatigue_table.recovery_rate:
            raise ScenarioError(f"missing recovery rate for rest mode {mode!r}")
    if s.fatigue_table.delta_eff < 0:
        raise ScenarioError("delta_eff must be >= 0")

    if s.product_order < 1:
        raise ScenarioError("product order must be >= 1")

    for region_name in ("human_spawn", "robot_spawn", "cage_spawn"):
        region = getattr(s.entity_pool, region_name)
        if region is not None and not _region_free_cells(s.grid, region):
            raise ScenarioError(f"{region_name} region contains no free cells")
    return s


def _region_free_cells(grid: GridMap, region) -> list[tuple[int, int]]:
    if region is None:
        return grid.free_cells()
    r0, c0, r1, c1 = region
    return [
        (r, c)
        for r in range(r0, r1 + 1)
        for c in range(c0, c1 + 1)
        if grid.is_free((r, c))
    ]


# ---------------------------------------------------------------------------
# Text format


def _parse_cell(text: str, where: str) -> tuple[int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ScenarioError(f"{where}: expected 'row,col', got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ScenarioError(f"{where}: bad cell {text!r}") from exc


def _parse_range(text: str, where: str) -> tuple[int, int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
    else:
        lo = hi = text
    try:
        lo_i, hi_i = int(lo), int(hi)
    except ValueError as exc:
        raise ScenarioError(f"{where}: bad count range {text!r}") from exc
    if not (1 <= lo_i <= hi_i):
        raise ScenarioError(f"{where}: range must satisfy 1 <= lo <= hi")
    return lo_i, hi_i


def _parse_region(text: str, where: str) -> tuple:
    if ".." not in text:
        raise ScenarioError(f"{where}: expected 'r0,c0 .. r1,c1'")
    a, b = text.split("..", 1)
    r0, c0 = _parse_cell(a.strip(), where)
    r1, c1 = _parse_cell(b.strip(), where)
    return (r0, c0, r1, c1)


def parse_scenario(text: str) -> Scenario:
    """Parse and validate the scenario text format.

    Sections: ``[subtasks]`` rows ``id | name | performer | ticks | row,col``;
    ``[tasks]`` rows ``id | name | sub,sub,...``; ``[deps]`` rows ``a -> b``;
    ``[fatigue]`` entries ``lambda <subtask> = x``, ``mu <mode> = x``,
    ``delta_eff = x``, ``type <name> = x``; ``[grid]`` rows of ``.``/``#``;
    ``[order]`` entries ``products/humans/robots/cages/..._spawn``.
    """
    sections: dict[str, list[str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip().lower()
            if current not in _SECTIONS:
                raise ScenarioError(f"line {lineno}: unknown section [{current}]")
            if current in sections:
                raise ScenarioError(f"line {lineno}: duplicate section [{current}]")
            sections[current] = []
            continue
        if current == "grid":
            # '#' is an obstacle glyph here, so grid rows carry no comments.
            sections["grid"].append(stripped)
            continue
        if stripped.startswith("#"):
            continue
        line = stripped.split("#", 1)[0].strip()
        if not line:
            continue
        if current is None:
            raise ScenarioError(f"line {lineno}: content outside any section")
        sections[current].append(line)

    for required in _SECTIONS:
        if required not in sections:
            raise ScenarioError(f"missing section [{required}]")

    # grid
    rows = sections["grid"]
    width = len(rows[0])
    occupancy = []
    for row in rows:
        if len(row) != width:
            raise ScenarioError("grid rows must all have the same width")
        for ch in row:
            if ch == ".":
                occupancy.append(False)
            elif ch == "#":
                occupancy.append(True)
            else:
                raise ScenarioError(f"grid cell must be '.' or '#', got {ch!r}")
    grid = GridMap(width=width, height=len(rows), occupancy=tuple(occupancy))

    # subtasks
    subtasks = []
    for line in sections["subtasks"]:
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 5:
            raise ScenarioError(f"subtask row needs 5 fields: {line!r}")
        sid, name, performer, ticks, loc = parts
        try:
            static_time = int(ticks)
        except ValueError as exc:
            raise ScenarioError(f"subtask {sid}: bad static time {ticks!r}") from exc
        subtasks.append(
            SubtaskDef(
                id=sid,
                name=name,
                performer=performer,
                static_time=static_time,
                location=_parse_cell(loc, f"subtask {sid}"),
            )
        )

    # tasks
    tasks = []
    for line in sections["tasks"]:
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 3:
            raise ScenarioError(f"task row needs 3 fields: {line!r}")
        tid, name, subs = parts
        sub_ids = tuple(s.strip() for s in subs.split(",") if s.strip())
        if not sub_ids:
            raise ScenarioError(f"task {tid}: empty subtask list")
        tasks.append(TaskDef(id=tid, name=name, subtask_ids=sub_ids))

    # deps
    edges = []
    for line in sections["deps"]:
        if "->" not in line:
            raise ScenarioError(f"dependency row needs 'a -> b': {line!r}")
        a, b = (p.strip() for p in line.split("->", 1))
        edges.append((a, b))

    # fatigue
    work_rate: dict[str, float] = {}
    recovery_rate: dict[str, float] = {}
    delta_eff = None
    multipliers: dict[str, float] = {}
    for line in sections["fatigue"]:
        if "=" not in line:
            raise ScenarioError(f"fatigue row needs '=': {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            number = float(value)
        except ValueError as exc:
            raise ScenarioError(f"fatigue entry {key!r}: bad value {value!r}") from exc
        fields = key.split()
        if fields[0] == "lambda" and len(fields) == 2:
            work_rate[fields[1]] = number
        elif fields[0] == "mu" and len(fields) == 2:
            if fields[1] not in REST_MODES:
                raise ScenarioError(f"unknown rest mode {fields[1]!r}")
            recovery_rate[fields[1]] = number
        elif key == "delta_eff":
            delta_eff = number
        elif fields[0] == "type" and len(fields) == 2:
            multipliers[fields[1]] = number
        else:
            raise ScenarioError(f"unknown fatigue key {key!r}")
    if delta_eff is None:
        raise ScenarioError("missing delta_eff in [fatigue]")
    if not multipliers:
        multipliers = dict(HUMAN_TYPES)

    # order / entity pool
    order_values: dict[str, str] = {}
    for line in sections["order"]:
        if "=" not in line:
            raise ScenarioError(f"order row needs '=': {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _ORDER_KEYS:
            raise ScenarioError(f"unknown order key {key!r}")
        order_values[key] = value
    if "products" not in order_values:
        raise ScenarioError("missing 'products' in [order]")
    try:
        product_order = int(order_values["products"])
    except ValueError as exc:
        raise ScenarioError("'products' must be an integer") from exc

    pool = EntityPool(
        human_range=_parse_range(order_values.get("humans", "1..3"), "humans"),
        robot_range=_parse_range(order_values.get("robots", "1..3"), "robots"),
        cage_count=int(order_values.get("cages", "2")),
        human_spawn=(
            _parse_region(order_values["human_spawn"], "human_spawn")
            if "human_spawn" in order_values
            else None
        ),
        robot_spawn=(
            _parse_region(order_values["robot_spawn"], "robot_spawn")
            if "robot_spawn" in order_values
            else None
        ),
        cage_spawn=(
            _parse_region(order_values["cage_spawn"], "cage_spawn")
            if "cage_spawn" in order_values
            else None
        ),
    )

    scenario = Scenario(
        tasks=tuple(tasks),
        subtasks=tuple(subtasks),
        dependency_edges=tuple(edges),
        grid=grid,
        fatigue_table=FatigueTable(
            work_rate=work_rate,
            recovery_rate=recovery_rate,
            delta_eff=delta_eff,
            human_type_multipliers=multipliers,
        ),
        entity_pool=pool,
        product_order=product_order,
    )
    return validate_scenario(scenario)


def load_scenario(path) -> Scenario:
    """Load and validate a scenario file (UTF-8 text)."""
    with open(path, encoding="utf-8") as handle:
        return parse_scenario(handle.read())


def default_scenario() -> Scenario:
    """The bundled duct-factory scenario.

    A reconstruction of an air-conditioning-duct line: component preparation
    for flanges and bend ducts, robot hauls for straight and branch ducts,
    two welding stations, a shared station-control step with machine
    assembly, and human+robot product storage.
    """
    text = (
        resources.files("ergosched.data").joinpath("duct_factory.scn").read_text("utf-8")
    )
    return parse_scenario(text)


def with_order(scenario: Scenario, products: int) -> Scenario:
    """Copy of the scenario with a different product order."""
    return validate_scenario(replace(scenario, product_order=products))


def with_entity_counts(scenario: Scenario, humans: tuple, robots: tuple) -> Scenario:
    """Copy of the scenario with different human/robot count ranges."""
    pool = replace(scenario.entity_pool, human_range=humans, robot_range=robots)
    return validate_scenario(replace(scenario, entity_pool=pool))


def randomize_episode(scenario: Scenario, seed: int) -> EpisodeInit:
    """Draw one episode's entity counts, human types, and start positions."""
    rng = np.random.default_rng(seed)
    pool = scenario.entity_pool
    n_humans = int(rng.integers(pool.human_range[0], pool.human_range[1] + 1))
    n_robots = int(rng.integers(pool.robot_range[0], pool.robot_range[1] + 1))

    type_names = sorted(scenario.fatigue_table.human_type_multipliers)
    humans = []
    human_cells = _draw_cells(scenario.grid, pool.human_spawn, n_humans, rng, "human")
    for k in range(n_humans):
        name = type_names[int(rng.integers(0, len(type_names)))]
        humans.append(
            HumanInit(
                type_name=name,
                type_multiplier=scenario.fatigue_table.human_type_multipliers[name],
                position=human_cells[k],
            )
        )
    robot_cells = _draw_cells(scenario.grid, pool.robot_spawn, n_robots, rng, "robot")
    cage_cells = _draw_cells(scenario.grid, pool.cage_spawn, pool.cage_count, rng, "cage")
    return EpisodeInit(
        humans=tuple(humans),
        robot_positions=tuple(robot_cells),
        cage_positions=tuple(cage_cells),
        seed=seed,
    )


def _draw_cells(grid, region, count, rng, label) -> list[tuple[int, int]]:
    cells = sorted(_region_free_cells(grid, region))
    if count > len(cells):
        raise ScenarioError(
            f"cannot spawn {count} {label} entities on {len(cells)} free cells"
        )
    picked = rng.choice(len(cells), size=count, replace=False)
    return [cells[int(i)] for i in picked]
