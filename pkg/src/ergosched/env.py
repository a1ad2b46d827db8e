"""Discrete-tick production simulator with ground-truth fatigue dynamics.

One `step` advances one tick: it optionally starts a task (assigning the
chosen human/robot), moves walking entities one cell, applies one fatigue
update per human according to what they are doing, advances work on active
subtasks, and fires completions. Estimated parameters never enter the
dynamics; they only appear in observations.

A product unit is complete when every task in the scenario has run once;
task completion flags then reset for the next unit until the product order
is met or the horizon runs out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .allocation import ExpandedAction, shortest_path
from .estimation import WAIT
from .fatigue import measure_fatigue, randomize_exec_time, rest_step, simulate_subtask, work_step

IDLE = "idle"
WALKING = "walking"
WAITING = "waiting"
WORKING = "working"

# Token kinds, in canonical observation order.
KIND_HUMAN = 0
KIND_ROBOT = 1
KIND_MACHINE = 2
KIND_MATERIAL = 3
KIND_TASK = 4
KIND_SUBTASK = 5
KIND_FPARAM = 6

# Shared status vocabulary for categorical token fields.
STATUS = {
    "none": 0,
    "blocked": 1,
    "ready": 2,
    "active": 3,
    "done": 4,
    IDLE: 5,
    WALKING: 6,
    WAITING: 7,
    WORKING: 8,
    "busy": 9,
}


class IllegalAction(ValueError):
    """Action violates a precondition; the message names it."""


@dataclass(frozen=True)
class RewardConfig:
    eta1: float = 0.005  # per-tick time penalty
    eta2: float = 5.0  # terminal goal bonus / miss penalty
    eta3: float = 1.0  # per-product progress bonus
    horizon: int = 2500
    fatigue_limit: float = 0.95

    def __post_init__(self):
        if min(self.eta1, self.eta2, self.eta3) < 0:
            raise ValueError("reward weights must be >= 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 < self.fatigue_limit <= 1:
            raise ValueError("fatigue limit must lie in (0, 1]")


@dataclass(frozen=True)
class EpisodeMetrics:
    makespan: int
    overwork: int
    progress: float


@dataclass
class HumanState:
    position: tuple
    fatigue: float
    type_multiplier: float
    task: str | None = None
    phase: str = IDLE
    path: tuple = ()
    rest_mode: str = "free"


@dataclass
class RobotState:
    position: tuple
    task: str | None = None
    phase: str = IDLE
    path: tuple = ()


@dataclass
class MachineState:
    location: tuple
    task: str | None = None
    subtask: str | None = None


@dataclass
class MaterialState:
    position: tuple
    task: str | None = None  # transport task this cage belongs to


@dataclass
class _Execution:
    task_id: str
    sub_idx: int
    human: int | None
    robot: int | None
    work_left: int = -1  # -1: current subtask has not started working yet
    duration: int = 0
    # Fatiguing ticks within the duration; the remainder is disturbance time
    # (interruptions, minor delays) spent waiting, not working.
    fatigue_ticks: int = 0
    subtask_id: str | None = None
    machine: int | None = None


@dataclass
class EpisodeTrace:
    """Everything needed for metrics, exports, and plots after an episode."""

    fatigue_limits: tuple
    events: list = field(default_factory=list)  # (tick, entity, event, fatigue)
    fatigue_series: list = field(default_factory=list)  # per tick: tuple per human
    gantt: list = field(default_factory=list)  # (entity, task, start, end)
    completion_tick: int | None = None
    horizon: int = 0
    product_order: int = 0
    products_done: int = 0


class WorldState:
    def __init__(self, scenario, init, cfg: RewardConfig, seed):
        self.scenario = scenario
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.sigma_time = 0.1
        self.sigma_m = 5e-5
        self.tick = 0
        self.humans = [
            HumanState(position=h.position, fatigue=0.0, type_multiplier=h.type_multiplier)
            for h in init.humans
        ]
        self.robots = [RobotState(position=p) for p in init.robot_positions]
        self.machines = [MachineState(location=loc) for loc in scenario.machine_locations()]
        self._machine_at = {m.location: i for i, m in enumerate(self.machines)}
        robot_tasks = [
            t.id
            for t in scenario.tasks
            if all(scenario.subtask(s).performer == "robot" for s in t.subtask_ids)
        ]
        self.materials = [
            MaterialState(position=p, task=robot_tasks[i] if i < len(robot_tasks) else None)
            for i, p in enumerate(init.cage_positions)
        ]
        self.task_done = {t.id: False for t in scenario.tasks}
        self.executions: list[_Execution] = []
        self.products_done = 0
        self.done = False
        self.makespan = None
        self.limits = [cfg.fatigue_limit] * len(self.humans)
        self.overwork = 0
        self.last_measurements = [
            measure_fatigue(h.fatigue, self.sigma_m, self.rng) for h in self.humans
        ]
        self.trace = EpisodeTrace(
            fatigue_limits=tuple(self.limits),
            horizon=cfg.horizon,
            product_order=scenario.product_order,
        )
        self._assign_tick: dict = {}
        self._last_worked: dict = {}

    # -- queries ------------------------------------------------------------

    def idle_humans(self) -> list[int]:
        return [k for k, h in enumerate(self.humans) if h.task is None]

    def idle_robots(self) -> list[int]:
        return [i for i, r in enumerate(self.robots) if r.task is None]

    def active_tasks(self) -> set:
        return {e.task_id for e in self.executions}

    def ready_tasks(self) -> list[str]:
        """Tasks whose dependencies are met and that are not active or done."""
        active = self.active_tasks()
        out = []
        for t in self.scenario.tasks:
            if self.task_done[t.id] or t.id in active:
                continue
            if all(self.task_done[p] for p in self.scenario.predecessors(t.id)):
                out.append(t.id)
        return out

    def startable_tasks(self) -> list[str]:
        """Ready tasks whose required entity classes have an idle instance."""
        idle_h = bool(self.idle_humans())
        idle_r = bool(self.idle_robots())
        busy_machines = {
            e.machine for e in self.executions if e.machine is not None
        }
        out = []
        for tid in self.ready_tasks():
            task = self.scenario.task(tid)
            performers = [self.scenario.subtask(s).performer for s in task.subtask_ids]
            if any("human" in p for p in performers) and not idle_h:
                continue
            if any("robot" in p for p in performers) and not idle_r:
                continue
            machine_ok = True
            for sid in task.subtask_ids:
                sub = self.scenario.subtask(sid)
                if sub.performer == "machine":
                    if self._machine_at[sub.location] in busy_machines:
                        machine_ok = False
            if machine_ok:
                out.append(tid)
        return out

    def fatigue_vector(self) -> list[float]:
        return [h.fatigue for h in self.humans]

    def fingerprint(self) -> tuple:
        """Canonical, rng-free snapshot for determinism checks."""
        return (
            self.tick,
            tuple((h.position, round(h.fatigue, 15), h.task, h.phase) for h in self.humans),
            tuple((r.position, r.task, r.phase) for r in self.robots),
            tuple((m.task, m.subtask) for m in self.machines),
            tuple(sorted(self.task_done.items())),
            self.products_done,
            self.done,
        )

    # -- stepping -----------------------------------------------------------

    def _begin(self, action: ExpandedAction) -> None:
        tid = action.task
        if self.task_done[tid]:
            raise IllegalAction(f"task {tid} already complete this unit")
        if tid in self.active_tasks():
            raise IllegalAction(f"task {tid} already running")
        if not all(self.task_done[p] for p in self.scenario.predecessors(tid)):
            raise IllegalAction(f"task {tid} has unmet dependencies")
        task = self.scenario.task(tid)
        performers = [self.scenario.subtask(s).performer for s in task.subtask_ids]
        needs_human = any("human" in p for p in performers)
        needs_robot = any("robot" in p for p in performers)
        if needs_human:
            if action.human is None:
                raise IllegalAction(f"task {tid} needs a human assignee")
            if self.humans[action.human].task is not None:
                raise IllegalAction(f"human {action.human} is busy")
        if needs_robot:
            if action.robot is None:
                raise IllegalAction(f"task {tid} needs a robot assignee")
            if self.robots[action.robot].task is not None:
                raise IllegalAction(f"robot {action.robot} is busy")
        execution = _Execution(
            task_id=tid,
            sub_idx=0,
            human=action.human if needs_human else None,
            robot=action.robot if needs_robot else None,
        )
        if execution.human is not None:
            self.humans[execution.human].task = tid
            self._assign_tick[("H", execution.human, tid)] = self.tick
        if execution.robot is not None:
            self.robots[execution.robot].task = tid
            self._assign_tick[("R", execution.robot, tid)] = self.tick
        self.executions.append(execution)
        self._setup_subtask(execution)
        self._event(f"T{tid}", "assigned", None)

    def _setup_subtask(self, e: _Execution) -> None:
        """Point the execution at its current subtask and route entities."""
        task = self.scenario.task(e.task_id)
        sid = task.subtask_ids[e.sub_idx]
        sub = self.scenario.subtask(sid)
        e.subtask_id = sid
        e.work_left = -1
        e.duration = 0
        e.machine = self._machine_at[sub.location] if sub.performer == "machine" else None
        if "human" in sub.performer and e.human is not None:
            h = self.humans[e.human]
            path = shortest_path(self.scenario.grid, h.position, sub.location)
            h.path = path.path[1:]
            h.phase = WALKING if h.path else WAITING
        if "robot" in sub.performer and e.robot is not None:
            r = self.robots[e.robot]
            path = shortest_path(self.scenario.grid, r.position, sub.location)
            r.path = path.path[1:]
            r.phase = WALKING if r.path else WAITING

    def _participants_ready(self, e: _Execution, sub) -> bool:
        if "human" in sub.performer:
            h = self.humans[e.human]
            if h.path:
                return False
        if "robot" in sub.performer:
            r = self.robots[e.robot]
            if r.path:
                return False
        if sub.performer == "machine":
            busy = {
                x.machine
                for x in self.executions
                if x is not e and x.machine is not None and x.work_left >= 0
            }
            if e.machine in busy:
                return False
        return True

    def _start_work(self, e: _Execution, sub) -> None:
        if "human" in sub.performer:
            h = self.humans[e.human]
            rate = self.scenario.fatigue_table.work_rate[e.subtask_id] * h.type_multiplier
            nominal, _ = simulate_subtask(
                h.fatigue, sub.static_time, rate, self.scenario.fatigue_table.delta_eff
            )
        else:
            nominal = sub.static_time
        e.duration = randomize_exec_time(nominal, self.sigma_time, 0, self.rng)
        e.fatigue_ticks = min(e.duration, nominal)
        e.work_left = e.duration
        if sub.performer == "machine":
            self.machines[e.machine].task = e.task_id
            self.machines[e.machine].subtask = e.subtask_id
        self._event(f"T{e.task_id}", f"start:{e.subtask_id}", None)

    def _release_if_done(self, e: _Execution) -> None:
        """Free entities that have no remaining subtasks in this task."""
        task = self.scenario.task(e.task_id)
        remaining = [
            self.scenario.subtask(s).performer for s in task.subtask_ids[e.sub_idx :]
        ]
        if e.human is not None and not any("human" in p for p in remaining):
            h = self.humans[e.human]
            start = self._assign_tick.pop(("H", e.human, e.task_id), self.tick)
            self.trace.gantt.append((f"H{e.human}", e.task_id, start, self.tick))
            h.task = None
            h.phase = IDLE
            h.path = ()
            e.human = None
        if e.robot is not None and not any("robot" in p for p in remaining):
            r = self.robots[e.robot]
            start = self._assign_tick.pop(("R", e.robot, e.task_id), self.tick)
            self.trace.gantt.append((f"R{e.robot}", e.task_id, start, self.tick))
            r.task = None
            r.phase = IDLE
            r.path = ()
            e.robot = None

    def _advance_executions(self) -> list[str]:
        """One tick of travel/work for every active execution."""
        finished: list[str] = []
        working_humans: set[int] = set()
        for e in sorted(self.executions, key=lambda x: x.task_id):
            sub = self.scenario.subtask(e.subtask_id)
            if e.work_left < 0:
                # Travel/wait stage: move whoever still has a path.
                if "human" in sub.performer and self.humans[e.human].path:
                    h = self.humans[e.human]
                    h.position, h.path = h.path[0], h.path[1:]
                    h.phase = WALKING if h.path else WAITING
                if "robot" in sub.performer and self.robots[e.robot].path:
                    r = self.robots[e.robot]
                    r.position, r.path = r.path[0], r.path[1:]
                    r.phase = WALKING if r.path else WAITING
                if self._participants_ready(e, sub):
                    self._start_work(e, sub)
            if e.work_left > 0:
                # Work stage: humans accumulate fatigue on fatiguing ticks;
                # duration stretch beyond the nominal time is disturbance
                # time spent waiting.
                if "human" in sub.performer:
                    h = self.humans[e.human]
                    if e.fatigue_ticks > 0:
                        h.phase = WORKING
                        rate = (
                            self.scenario.fatigue_table.work_rate[e.subtask_id]
                            * h.type_multiplier
                        )
                        h.fatigue = work_step(h.fatigue, rate)
                        working_humans.add(e.human)
                        e.fatigue_ticks -= 1
                    else:
                        h.phase = WAITING
                if "robot" in sub.performer:
                    self.robots[e.robot].phase = WORKING
                e.work_left -= 1
                if e.work_left == 0:
                    self._event(f"T{e.task_id}", f"end:{e.subtask_id}", None)
                    task = self.scenario.task(e.task_id)
                    e.sub_idx += 1
                    if e.machine is not None:
                        self.machines[e.machine].task = None
                        self.machines[e.machine].subtask = None
                    self._release_if_done(e)
                    if e.sub_idx >= len(task.subtask_ids):
                        finished.append(e.task_id)
                    else:
                        self._setup_subtask(e)
        for tid in finished:
            self.executions = [e for e in self.executions if e.task_id != tid]
            self.task_done[tid] = True
            self._event(f"T{tid}", "done", None)
        self._rest_and_measure(working_humans)
        return finished

    def _rest_and_measure(self, working_humans) -> None:
        for k, h in enumerate(self.humans):
            if k in working_humans:
                h.rest_mode = ""
                continue
            if h.task is None:
                mode = "free"
                h.phase = IDLE
            elif h.phase == WALKING:
                mode = "walking"
            else:
                mode = "waiting"
            h.rest_mode = mode
            h.fatigue = rest_step(h.fatigue, self.scenario.fatigue_table.recovery_rate[mode])
        self.last_measurements = [
            measure_fatigue(h.fatigue, self.sigma_m, self.rng) for h in self.humans
        ]

    def _event(self, entity: str, event: str, fatigue) -> None:
        self.trace.events.append((self.tick, entity, event, fatigue))

    def human_status(self, k: int) -> tuple:
        """Filter-facing status for the last tick: working subtask or rest mode."""
        h = self.humans[k]
        if h.rest_mode == "":
            for e in self.executions:
                if e.human == k and e.work_left >= 0:
                    return ("working", e.subtask_id)
            # Subtask just completed this tick; attribute it to the last one.
            return ("working", self._last_worked[k])
        return ("resting", h.rest_mode)


def reset(scenario, init, cfg: RewardConfig, seed, noise=None) -> WorldState:
    """Fresh world: zero fatigue, no active subtasks, positions per init."""
    world = WorldState(scenario, init, cfg, seed)
    if noise is not None:
        world.sigma_time = noise.sigma_time
        world.sigma_m = noise.sigma_m
    return world


def step(world: WorldState, action) -> tuple[WorldState, float, bool, dict]:
    """Advance one tick under ``action`` (ExpandedAction or WAIT/None)."""
    if world.done:
        raise IllegalAction("episode already terminated")
    prev_fatigue = [h.fatigue for h in world.humans]
    # Track which subtask each working human was on, for status attribution.
    world._last_worked = {
        e.human: e.subtask_id for e in world.executions if e.human is not None
    }
    if action is not None and not (isinstance(action, str) and action == WAIT):
        world._begin(action)
        world._last_worked.update(
            {e.human: e.subtask_id for e in world.executions if e.human is not None}
        )
    finished = world._advance_executions()

    unit_done = all(world.task_done.values())
    product_completed = False
    if unit_done:
        world.products_done += 1
        world.trace.products_done = world.products_done
        product_completed = True
        world._event("env", "product", None)
        if world.products_done < world.scenario.product_order:
            for tid in world.task_done:
                world.task_done[tid] = False

    onsets = 0
    for k, h in enumerate(world.humans):
        if prev_fatigue[k] < world.limits[k] <= h.fatigue:
            onsets += 1
            world._event(f"H{k}", "violation", round(h.fatigue, 6))
    world.overwork += onsets

    world.trace.fatigue_series.append(tuple(h.fatigue for h in world.humans))

    order_met = world.products_done >= world.scenario.product_order
    at_horizon = world.tick + 1 >= world.cfg.horizon
    done = order_met or at_horizon
    reward = compute_reward(
        world.cfg,
        product_completed=product_completed,
        order_met_now=done and order_met,
        horizon_miss=done and not order_met,
    )
    world.tick += 1
    if done:
        world.done = True
        world.makespan = world.tick if order_met else world.cfg.horizon
        world.trace.completion_tick = world.makespan if order_met else None
    info = {
        "finished_tasks": finished,
        "product_completed": product_completed,
        "violation_onsets": onsets,
        "measurements": list(world.last_measurements),
        "statuses": [world.human_status(k) for k in range(len(world.humans))],
    }
    return world, reward, done, info


def compute_reward(cfg: RewardConfig, product_completed=False, order_met_now=False, horizon_miss=False) -> float:
    """Per-tick reward: time penalty, progress bonus, terminal goal term."""
    reward = -cfg.eta1
    if product_completed:
        reward += cfg.eta3
    if order_met_now:
        reward += cfg.eta2
    elif horizon_miss:
        reward -= cfg.eta2
    return reward


def episode_metrics(trace: EpisodeTrace) -> EpisodeMetrics:
    """Makespan, violation onsets, and completed fraction from a trace."""
    overwork = 0
    n = len(trace.fatigue_limits)
    prev = [0.0] * n
    for row in trace.fatigue_series:
        for k in range(n):
            if prev[k] < trace.fatigue_limits[k] <= row[k]:
                overwork += 1
        prev = list(row)
    makespan = trace.completion_tick if trace.completion_tick is not None else trace.horizon
    progress = trace.products_done / trace.product_order if trace.product_order else 0.0
    return EpisodeMetrics(makespan=makespan, overwork=overwork, progress=min(progress, 1.0))


# ---------------------------------------------------------------------------
# Observations


@dataclass(frozen=True)
class Observation:
    kinds: np.ndarray  # (N,) token kind ids
    cats: np.ndarray  # (N, 3) categorical ids: task+1, subtask+1, status
    cont: np.ndarray  # (N, C) continuous features, zero-padded

    @property
    def n_tokens(self) -> int:
        return len(self.kinds)

    def key(self) -> tuple:
        return (self.kinds.shape, self.cats.tobytes(), self.cont.tobytes())


def cont_width(scenario) -> int:
    return max(4, 1 + len(scenario.human_subtask_ids()))


def observe(world: WorldState, bank) -> Observation:
    """Tokenized state: entities, task/subtask status, per-human estimates."""
    scenario = world.scenario
    task_index = {t.id: i for i, t in enumerate(scenario.tasks)}
    sub_index = {s.id: i for i, s in enumerate(scenario.subtasks)}
    width = cont_width(scenario)
    height = scenario.grid.height
    gwidth = scenario.grid.width
    kinds, cats, cont = [], [], []

    def push(kind, task_id, subtask_id, status, features):
        kinds.append(kind)
        cats.append(
            (
                0 if task_id is None else task_index[task_id] + 1,
                0 if subtask_id is None else sub_index[subtask_id] + 1,
                STATUS[status],
            )
        )
        row = [0.0] * width
        row[: len(features)] = features
        cont.append(row)

    exec_by_task = {e.task_id: e for e in world.executions}

    def sub_progress(e):
        return 1.0 - e.work_left / e.duration if e.work_left >= 0 and e.duration else 0.0

    for k, h in enumerate(world.humans):
        e = exec_by_task.get(h.task) if h.task else None
        progress = sub_progress(e) if e is not None and e.human == k else 0.0
        push(
            KIND_HUMAN,
            h.task,
            e.subtask_id if e is not None else None,
            h.phase,
            [
                world.last_measurements[k],
                h.position[0] / height,
                h.position[1] / gwidth,
                progress,
            ],
        )
    for i, r in enumerate(world.robots):
        e = exec_by_task.get(r.task) if r.task else None
        progress = sub_progress(e) if e is not None and e.robot == i else 0.0
        push(
            KIND_ROBOT,
            r.task,
            e.subtask_id if e is not None else None,
            r.phase,
            [r.position[0] / height, r.position[1] / gwidth, progress],
        )
    for m in world.machines:
        e = exec_by_task.get(m.task) if m.task else None
        progress = sub_progress(e) if e is not None else 0.0
        push(KIND_MACHINE, m.task, m.subtask, "busy" if m.task else IDLE, [progress])
    for mat in world.materials:
        active = mat.task is not None and mat.task in exec_by_task
        e = exec_by_task.get(mat.task) if active else None
        push(
            KIND_MATERIAL,
            mat.task,
            e.subtask_id if e is not None else None,
            "active" if active else ("done" if mat.task and world.task_done[mat.task] else IDLE),
            [sub_progress(e) if e is not None else 0.0],
        )
    ready = set(world.ready_tasks())
    active = world.active_tasks()
    for t in scenario.tasks:
        if world.task_done[t.id]:
            status = "done"
        elif t.id in active:
            status = "active"
        elif t.id in ready:
            status = "ready"
        else:
            status = "blocked"
        e = exec_by_task.get(t.id)
        frac = e.sub_idx / len(t.subtask_ids) if e else (1.0 if world.task_done[t.id] else 0.0)
        push(KIND_TASK, t.id, None, status, [frac])
    for s in scenario.subtasks:
        running = next((e for e in world.executions if e.subtask_id == s.id), None)
        status = "active" if running is not None else "none"
        push(KIND_SUBTASK, None, s.id, status, [sub_progress(running) if running else 0.0])
    human_subs = scenario.human_subtask_ids()
    for k in range(len(world.humans)):
        features = [bank.mu_estimate(k)] + [bank.lambda_estimate(k, sid) for sid in human_subs]
        push(KIND_FPARAM, None, None, "none", features)

    return Observation(
        kinds=np.array(kinds, dtype=np.int64),
        cats=np.array(cats, dtype=np.int64),
        cont=np.array(cont, dtype=np.float64),
    )


def write_trace(trace: EpisodeTrace, path) -> None:
    """Line-delimited event export: tick, entity, event, fatigue."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("tick\tentity\tevent\tfatigue\n")
        for tick, entity, event, fatigue in trace.events:
            fat = "" if fatigue is None else repr(fatigue)
            handle.write(f"{tick}\t{entity}\t{event}\t{fat}\n")


def write_gantt(trace: EpisodeTrace, path) -> None:
    """Gantt export: entity, task id, start tick, end tick, color key."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("entity,task,start,end,color\n")
        for entity, task, start, end in sorted(trace.gantt):
            handle.write(f"{entity},{task},{start},{end},{task}\n")
