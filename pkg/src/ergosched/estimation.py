"""Online estimation of fatigue-model rates and fatigue-feasible task sets.

Each human carries one recovery-rate filter plus one accumulation-rate
filter per subtask they can perform. A filter only sees measurements taken
while its parameter is actually driving the dynamics: accumulation filters
update during work on their subtask, the recovery filter during free or
waiting rest. The bank keeps a dead-reckoned fatigue prediction per human
(seeded from the first measurement) that every likelihood evaluation
propagates from; measurements reweight hypotheses but never overwrite it.

Three filter families share this interface: a bootstrap particle filter
with systematic resampling, and scalar Kalman / extended Kalman filters on
the rate itself (secant vs analytic linearization of the one-tick fatigue
map).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .fatigue import PARAM_FLOOR, perturb_params, rest_step, simulate_subtask

WAIT = "WAIT"

WORK = "work"
REST = "rest"

PF = "PF"
KF = "KF"
EKF = "EKF"
FILTER_KINDS = (PF, KF, EKF)


def _propagate(f_prev: float, mode: str, rate) -> float | np.ndarray:
    """One-tick fatigue map, vectorized over the rate hypothesis."""
    if mode == WORK:
        return f_prev + (1.0 - f_prev) * (1.0 - np.exp(-rate))
    return f_prev * np.exp(-rate)


def _clamp_fatigue(value: float) -> float:
    # Measurements are unclipped; the dynamics domain is [0, 1).
    return min(max(value, 0.0), 1.0 - 1e-12)


def effective_sample_size(weights: np.ndarray) -> float:
    """Diversity of a normalized weight vector: 1 / sum(w^2)."""
    return 1.0 / float(np.sum(np.square(weights)))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Index vector drawn with one uniform offset over the cumulative weights."""
    n = len(weights)
    positions = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions)


@dataclass
class ParticleSet:
    particles: np.ndarray
    weights: np.ndarray
    mode: str  # WORK or REST
    rng: np.random.Generator
    # Roughening coefficient: after each resample, particles are perturbed by
    # Gaussian noise scaled to this fraction of the current particle spread.
    # Off by default; intended for long traces where the support would
    # otherwise freeze on an early collapse.
    jitter: float = 0.0
    degenerate_steps: int = 0
    resample_count: int = 0

    @property
    def estimate(self) -> float:
        return float(np.dot(self.weights, self.particles))

    @property
    def spread(self) -> float:
        mean = self.estimate
        return float(np.sqrt(np.dot(self.weights, np.square(self.particles - mean))))


def init_particles(
    param0: float,
    sigma_particle: float,
    n_particles: int = 500,
    seed=None,
    mode: str = WORK,
    jitter: float = 0.0,
) -> ParticleSet:
    """Uniform particle cloud on [param0*(1-sigma), param0*(1+sigma)]."""
    if param0 <= 0:
        raise ValueError("param0 must be > 0")
    if not 0 <= sigma_particle < 1:
        raise ValueError("sigma_particle must lie in [0, 1)")
    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    low = param0 * (1.0 - sigma_particle)
    high = param0 * (1.0 + sigma_particle)
    particles = rng.uniform(low, high, size=n_particles)
    weights = np.full(n_particles, 1.0 / n_particles)
    return ParticleSet(particles=particles, weights=weights, mode=mode, rng=rng, jitter=jitter)


def _roughen(ps: ParticleSet) -> None:
    if ps.jitter <= 0.0:
        return
    spread = float(np.std(ps.particles))
    if spread > 0.0:
        ps.particles = np.maximum(
            ps.particles + ps.rng.normal(0.0, ps.jitter * spread, size=len(ps.particles)),
            PARAM_FLOOR,
        )


def pf_update(
    ps: ParticleSet, z: float, f_prev: float, sigma_m: float
) -> tuple[ParticleSet, float, float]:
    """One measurement update; returns (set, rate estimate, fatigue prediction).

    Weights are multiplied by the Gaussian likelihood of ``z`` under each
    particle's one-tick propagation of ``f_prev``. If every likelihood
    underflows to zero the weights fall back to uniform and the step is
    flagged via ``degenerate_steps``. Resampling triggers below half the
    particle count.
    """
    if sigma_m <= 0:
        raise ValueError("sigma_m must be > 0 for the likelihood update")
    f_prev = _clamp_fatigue(f_prev)
    preds = _propagate(f_prev, ps.mode, ps.particles)
    residual = z - preds
    weights = ps.weights * np.exp(-np.square(residual) / (2.0 * sigma_m * sigma_m))
    total = float(weights.sum())
    degenerate = total <= 0.0 or not np.isfinite(total)
    if degenerate:
        weights = np.full(len(ps.particles), 1.0 / len(ps.particles))
        ps.degenerate_steps += 1
    else:
        weights = weights / total
    if not degenerate and effective_sample_size(weights) < len(ps.particles) / 2.0:
        idx = systematic_resample(weights, ps.rng)
        ps.particles = ps.particles[idx]
        weights = np.full(len(ps.particles), 1.0 / len(ps.particles))
        ps.resample_count += 1
        _roughen(ps)
    elif degenerate:
        # The whole support failed to explain the measurement; widening it is
        # the only way estimates can migrate on long traces.
        _roughen(ps)
    ps.weights = weights
    estimate = ps.estimate
    f_pred = float(_propagate(f_prev, ps.mode, max(estimate, PARAM_FLOOR)))
    return ps, estimate, f_pred


@dataclass
class GaussianFilterState:
    mean: float
    variance: float
    kind: str  # KF or EKF
    mode: str  # WORK or REST
    diverged: bool = False

    @property
    def estimate(self) -> float:
        return self.mean

    @property
    def spread(self) -> float:
        return float(np.sqrt(max(self.variance, 0.0)))


def init_gaussian_filter(
    kind: str, param0: float, sigma_prior: float, mode: str = WORK
) -> GaussianFilterState:
    """Gaussian prior on the rate: mean param0, std sigma_prior * param0.

    ``sigma_prior`` should match the relative uncertainty of the initial
    guess (the multiplicative perturbation scale), so the filter's prior is
    consistent with how the guess was actually generated.
    """
    if kind not in (KF, EKF):
        raise ValueError(f"kind must be KF or EKF, got {kind!r}")
    variance = (sigma_prior * param0) ** 2
    return GaussianFilterState(mean=param0, variance=variance, kind=kind, mode=mode)


def gaussian_filter_update(
    state: GaussianFilterState, z: float, f_prev: float, sigma_m: float
) -> tuple[GaussianFilterState, float, float]:
    """Scalar Kalman-style update of the rate under the one-tick fatigue map.

    The observation model is ``z = propagate(f_prev; rate) + noise``. The KF
    variant linearizes by central finite difference around the current mean;
    the EKF uses the analytic derivative. A non-finite or non-positive
    posterior mean (or non-finite variance) sets the divergence flag and
    freezes the state.
    """
    f_prev = _clamp_fatigue(f_prev)
    if state.diverged:
        f_pred = float(_propagate(f_prev, state.mode, max(state.mean, PARAM_FLOOR)))
        return state, state.mean, f_pred

    m = state.mean
    pred = float(_propagate(f_prev, state.mode, max(m, PARAM_FLOOR)))
    if state.kind == EKF:
        if state.mode == WORK:
            h = (1.0 - f_prev) * np.exp(-m)
        else:
            h = -f_prev * np.exp(-m)
    else:
        step = 1e-6 + 1e-4 * abs(m)
        hi = float(_propagate(f_prev, state.mode, max(m + step, PARAM_FLOOR)))
        lo = float(_propagate(f_prev, state.mode, max(m - step, PARAM_FLOOR)))
        h = (hi - lo) / (2.0 * step)

    s = h * h * state.variance + sigma_m * sigma_m
    if s > 0.0:
        gain = state.variance * h / s
        m = m + gain * (z - pred)
        state.variance = (1.0 - gain * h) * state.variance
    state.mean = m
    if not (np.isfinite(state.mean) and np.isfinite(state.variance)) or state.mean <= 0:
        state.diverged = True
    f_pred = float(_propagate(f_prev, state.mode, max(state.mean, PARAM_FLOOR)))
    return state, state.mean, f_pred


# ---------------------------------------------------------------------------
# Estimator bank


@dataclass(frozen=True)
class TaskPrediction:
    human: int
    task: str
    completion_time: int
    terminal_fatigue: float


@dataclass(frozen=True)
class SafeSets:
    e_safe: tuple  # per human: tuple of fatigue-feasible task ids
    a_safe: tuple  # task ids startable by at least one idle human, plus WAIT

    def mask(self, action_ids) -> np.ndarray:
        return np.array([a in self.a_safe for a in action_ids], dtype=bool)


class EstimatorBank:
    """All per-human filters for one episode plus the shared fatigue anchor.

    ``filter_kind`` selects PF, KF, or EKF for every filter in the bank.
    Initial rate guesses come from a multiplicative Gaussian perturbation of
    the episode's ground-truth (type-scaled) rates, so estimates are usable
    before the first measurement ever arrives.

    ``jitter`` (roughening after resamples and degenerate steps) applies to
    the accumulation filters only; the recovery filter sees far more
    measurements of a near-linear model, where support migration invites a
    runaway under persistent prediction bias.
    """

    def __init__(
        self,
        scenario,
        episode_init,
        noise_cfg,
        filter_kind: str = PF,
        n_particles: int = 500,
        seed=0,
        jitter: float = 0.0,
    ):
        if filter_kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {filter_kind!r}")
        self.scenario = scenario
        self.filter_kind = filter_kind
        self.noise = noise_cfg
        rng = np.random.default_rng(seed)
        self.n_humans = len(episode_init.humans)
        self.f_pred: list[float | None] = [None] * self.n_humans
        self.updates = 0
        self._lambda_filters: list[dict] = []
        self._mu_filters: list = []
        self._walking_mu: list[float] = []
        self._seen: list[set] = [set() for _ in range(self.n_humans)]
        self.initial_lambda: list[dict] = []
        self.initial_mu: list[float] = []

        human_subs = scenario.human_subtask_ids()
        table = scenario.fatigue_table
        for k in range(self.n_humans):
            true_rates = {
                sid: episode_init.work_rate(scenario, k, sid) for sid in human_subs
            }
            true_rates["__mu__"] = table.recovery_rate["free"]
            true_rates["__mu_walk__"] = table.recovery_rate["walking"]
            guesses = perturb_params(true_rates, noise_cfg.sigma_init, rng)
            lam0 = {sid: guesses[sid] for sid in human_subs}
            mu0 = guesses["__mu__"]
            self.initial_lambda.append(lam0)
            self.initial_mu.append(mu0)
            self._walking_mu.append(guesses["__mu_walk__"])
            if filter_kind == PF:
                self._lambda_filters.append(
                    {
                        sid: init_particles(
                            lam0[sid],
                            noise_cfg.sigma_particle,
                            n_particles,
                            seed=np.random.default_rng(rng.integers(2**63)),
                            mode=WORK,
                            jitter=jitter,
                        )
                        for sid in human_subs
                    }
                )
                self._mu_filters.append(
                    init_particles(
                        mu0,
                        noise_cfg.sigma_particle,
                        n_particles,
                        seed=np.random.default_rng(rng.integers(2**63)),
                        mode=REST,
                    )
                )
            else:
                self._lambda_filters.append(
                    {
                        sid: init_gaussian_filter(
                            filter_kind, lam0[sid], noise_cfg.sigma_init, WORK
                        )
                        for sid in human_subs
                    }
                )
                self._mu_filters.append(
                    init_gaussian_filter(filter_kind, mu0, noise_cfg.sigma_init, REST)
                )

    def lambda_filter(self, human: int, subtask_id: str):
        return self._lambda_filters[human][subtask_id]

    def mu_filter(self, human: int):
        return self._mu_filters[human]

    def lambda_estimate(self, human: int, subtask_id: str) -> float:
        return float(self._lambda_filters[human][subtask_id].estimate)

    def lambda_spread(self, human: int, subtask_id: str) -> float:
        return float(self._lambda_filters[human][subtask_id].spread)

    def mu_estimate(self, human: int) -> float:
        return float(self._mu_filters[human].estimate)

    def lambda_estimates(self, human: int) -> dict:
        return {
            sid: float(f.estimate) for sid, f in self._lambda_filters[human].items()
        }

    def update(self, human: int, status: tuple, z: float) -> None:
        """Feed one tick's measurement for one human.

        ``status`` is ``("working", subtask_id)`` or ``("resting", mode)``
        with mode in {"free", "waiting", "walking"}. A filter's first-ever
        update only activates it and re-seeds the fatigue anchor from the
        measurement; weighting starts from its second update. Walking ticks
        propagate the anchor with the (perturbed, unestimated) walking
        recovery rate.
        """
        kind, detail = status
        if kind == "working":
            key = ("lambda", detail)
            if detail not in self._lambda_filters[human]:
                raise KeyError(f"no accumulation filter for subtask {detail!r}")
        elif kind == "resting" and detail in ("free", "waiting"):
            key = ("mu",)
        elif kind == "resting" and detail == "walking":
            if self.f_pred[human] is None:
                self.f_pred[human] = float(z)
            else:
                self.f_pred[human] = rest_step(
                    _clamp_fatigue(self.f_pred[human]), self._walking_mu[human]
                )
            return
        else:
            raise ValueError(f"unknown status {status!r}")

        if self.f_pred[human] is None or key not in self._seen[human]:
            self._seen[human].add(key)
            self.f_pred[human] = float(z)
            return
        f_prev = self.f_pred[human]
        self.updates += 1
        if key == ("mu",):
            _, _, f_pred = self._dispatch(self._mu_filters[human], z, f_prev)
        else:
            _, _, f_pred = self._dispatch(self._lambda_filters[human][detail], z, f_prev)
        self.f_pred[human] = f_pred

    def _dispatch(self, filt, z, f_prev):
        if self.filter_kind == PF:
            return pf_update(filt, z, f_prev, self.noise.sigma_m)
        return gaussian_filter_update(filt, z, f_prev, self.noise.sigma_m)


def predict_task(
    human: int, task_id: str, bank: EstimatorBank, f_now: float, rate_margin: float = 0.0
) -> TaskPrediction:
    """Chain the subtask-time model over a task's human-performed subtasks.

    Uses the bank's current rate estimates and the scenario's efficiency
    scale; travel and execution-time noise are deliberately omitted. A task
    with no human subtasks predicts zero time and unchanged fatigue.

    ``rate_margin`` inflates each rate by that many posterior standard
    deviations, giving a one-sided conservative prediction whose slack
    shrinks to zero as the filters converge.
    """
    scenario = bank.scenario
    task = scenario.task(task_id)
    delta_eff = scenario.fatigue_table.delta_eff
    fatigue = _clamp_fatigue(f_now)
    total = 0
    touched = False
    for sid in task.subtask_ids:
        sub = scenario.subtask(sid)
        if "human" not in sub.performer:
            continue
        touched = True
        rate = bank.lambda_estimate(human, sid)
        if rate_margin:
            rate += rate_margin * bank.lambda_spread(human, sid)
        ticks, fatigue = simulate_subtask(fatigue, sub.static_time, max(rate, PARAM_FLOOR), delta_eff)
        total += ticks
    if not touched:
        return TaskPrediction(human=human, task=task_id, completion_time=0, terminal_fatigue=f_now)
    return TaskPrediction(
        human=human, task=task_id, completion_time=total, terminal_fatigue=fatigue
    )


def build_safe_sets(
    scenario,
    ready_tasks,
    bank: EstimatorBank,
    fatigue_by_human,
    limits,
    idle_humans=None,
    rate_margin: float = 1.0,
) -> SafeSets:
    """Fatigue-feasible task sets given the already-filtered ready tasks.

    ``ready_tasks`` must contain only tasks whose dependencies and resource
    requirements are currently met; this function applies the fatigue check
    on top. A task enters a human's safe list when the predicted terminal
    fatigue stays strictly below that human's limit; the global safe action
    set contains tasks feasible for at least one idle human (tasks without
    human subtasks pass automatically) and always includes WAIT.

    The feasibility prediction inflates rates by ``rate_margin`` posterior
    standard deviations (see ``predict_task``), so fresh, uncertain
    estimates act cautiously while converged ones give exact checks.
    """
    n = bank.n_humans
    if idle_humans is None:
        idle_humans = list(range(n))
    e_safe: list[list[str]] = [[] for _ in range(n)]
    a_safe: list[str] = []
    for tid in ready_tasks:
        task = scenario.task(tid)
        needs_human = any(
            "human" in scenario.subtask(sid).performer for sid in task.subtask_ids
        )
        if not needs_human:
            a_safe.append(tid)
            continue
        feasible_for = []
        for k in range(n):
            pred = predict_task(k, tid, bank, fatigue_by_human[k], rate_margin=rate_margin)
            if pred.terminal_fatigue < limits[k]:
                e_safe[k].append(tid)
                feasible_for.append(k)
        if any(k in idle_humans for k in feasible_for):
            a_safe.append(tid)
    a_safe.append(WAIT)
    return SafeSets(
        e_safe=tuple(tuple(x) for x in e_safe),
        a_safe=tuple(a_safe),
    )


# ---------------------------------------------------------------------------
# Trace export

TRACE_HEADER = ("tick", "human", "mode", "true_param", "estimate", "measurement", "n_eff")


def write_trace_csv(rows, path) -> None:
    """Write estimator trace rows (TRACE_HEADER order) as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(TRACE_HEADER)
        writer.writerows(rows)
