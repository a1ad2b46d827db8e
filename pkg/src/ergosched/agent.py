"""Constrained dueling double Q-learning over the production simulator.

The planner acts at decision points: ticks where at least one task is
startable and the startable/safe set changed since the last decision (or
the last decision launched a task). Rewards accumulate between decisions
into one replay transition. Each transition stores the safe-action mask of
its own state (the network's cross-attention query) and of its next state,
so TD targets never look outside the stored safe set.

Agent kinds: PF-CD3Q (masked, dueling, double targets), PF-DQN (masked,
plain head, vanilla targets), D3QN and DQN (unmasked baselines with a
violation-onset reward penalty).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env as production
from .allocation import AllocationUnavailable, allocate
from .estimation import WAIT, EstimatorBank, SafeSets, build_safe_sets
from .fatigue import NoiseConfig
from .neural import (
    FROZEN_ZERO,
    SAMPLED,
    NetworkConfig,
    QNetwork,
    config_hash,
    load_params,
    restore_into,
    save_params,
    stack_observations,
    zero_grads,
)
from .neural import autodiff as ad
from .neural.autodiff import Tensor
from .scenario import randomize_episode

AGENT_KINDS = ("PF-CD3Q", "PF-DQN", "DQN", "D3QN")

GREEDY = "greedy"
NOISY_EXPLORE = "noisy-explore"


def _limit_blas_threads() -> None:
    # Tiny matrices everywhere; BLAS thread fan-out only adds contention.
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=1, user_api="blas")
    except Exception:
        pass


@dataclass(frozen=True)
class TrainConfig:
    agent_kind: str = "PF-CD3Q"
    learn_rate: float = 1e-4
    batch_size: int = 512
    gamma: float = 0.99
    warmup_steps: int = 50_000
    train_period: int = 400  # env steps between training bursts
    train_burst: int = 400  # gradient updates per burst
    buffer_capacity: int = 500_000
    target_period: int = 2_000  # gradient updates between target swaps
    episodes: int = 300
    per_alpha: float = 0.6
    per_beta0: float = 0.4
    per_beta1: float = 1.0
    per_eps: float = 1e-6
    penalty_weight: float = 1.0  # per violation onset, non-PF baselines
    rate_margin: float = 1.0  # safe-set conservatism, PF variants
    filter_kind: str = "PF"
    n_particles: int = 500
    explore_eps: float = 0.05  # fallback exploration when noisy layers are off
    wait_patience: int = 8  # ticks before re-deciding after an explicit WAIT

    def __post_init__(self):
        if self.agent_kind not in AGENT_KINDS:
            raise ValueError(f"agent kind must be one of {AGENT_KINDS}")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if min(self.train_period, self.train_burst, self.target_period) < 1:
            raise ValueError("periods must be >= 1")

    @property
    def masked(self) -> bool:
        return self.agent_kind.startswith("PF-")

    @property
    def dueling(self) -> bool:
        return self.agent_kind in ("PF-CD3Q", "D3QN")

    @property
    def double(self) -> bool:
        return self.agent_kind in ("PF-CD3Q", "D3QN")


# ---------------------------------------------------------------------------
# Replay


@dataclass
class Transition:
    obs: object
    action: int
    reward: float
    mask: np.ndarray  # safe mask at obs (query side)
    next_obs: object
    next_mask: np.ndarray  # safe mask at next_obs (target side)
    done: bool
    layout: bytes  # token-layout signature for batching


class ReplayBuffer:
    """Proportional prioritized replay with importance-sampling weights."""

    def __init__(self, capacity: int, alpha: float, eps: float, seed=0):
        self.capacity = capacity
        self.alpha = alpha
        self.eps = eps
        self.rng = np.random.default_rng(seed)
        self.data: list[Transition] = []
        self.priorities = np.zeros(capacity)
        self.pos = 0

    def __len__(self) -> int:
        return len(self.data)

    def push(self, transition: Transition) -> None:
        max_p = self.priorities[: len(self.data)].max() if self.data else 1.0
        if len(self.data) < self.capacity:
            self.data.append(transition)
            self.priorities[len(self.data) - 1] = max_p
        else:
            self.data[self.pos] = transition
            self.priorities[self.pos] = max_p
            self.pos = (self.pos + 1) % self.capacity

    def sample(self, batch_size: int, beta: float):
        n = len(self.data)
        scaled = self.priorities[:n] ** self.alpha
        probs = scaled / scaled.sum()
        idx = self.rng.choice(n, size=batch_size, p=probs)
        weights = (n * probs[idx]) ** (-beta)
        weights = weights / weights.max()
        return idx, [self.data[i] for i in idx], weights

    def update_priorities(self, idx, td_errors) -> None:
        self.priorities[idx] = np.abs(td_errors) + self.eps


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Adaptive moment estimation over a named parameter dict."""

    def __init__(self, params: dict, learn_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.learn_rate = learn_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1c = 1 - self.beta1**self.t
        b2c = 1 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * np.square(p.grad)
            p.data -= self.learn_rate * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# Action selection and targets


def action_ids(scenario) -> list[str]:
    return [t.id for t in scenario.tasks] + [WAIT]


def select_action(qvals: np.ndarray, safe_mask: np.ndarray, mode: str = GREEDY) -> int:
    """Masked argmax; ties break toward the lowest action index.

    Exploration (``noisy-explore``) comes from sampling the noisy layers
    before computing ``qvals``; the selection itself never leaves the mask.
    """
    if not np.asarray(safe_mask).any():
        raise ValueError("safe mask must contain at least WAIT")
    masked = np.where(safe_mask, qvals, -np.inf)
    return int(np.argmax(masked))


def td_targets(batch_next, rewards, dones, net, target_net, gamma, double: bool):
    """Double or vanilla Q targets restricted to each stored next-state mask."""
    q_target = target_net.forward(batch_next, FROZEN_ZERO).data
    if double:
        chooser = net.forward(batch_next, FROZEN_ZERO).data
    else:
        chooser = q_target
    masked = np.where(batch_next.mask > 0, chooser, -np.inf)
    best = np.argmax(masked, axis=1)
    bootstrap = q_target[np.arange(len(best)), best]
    return rewards + gamma * bootstrap * (1.0 - dones)


def train_step(buffer: ReplayBuffer, net, target_net, optimizer, cfg: TrainConfig, beta: float):
    """One PER minibatch update; returns (loss, sampled indices, td errors)."""
    idx, transitions, weights = buffer.sample(cfg.batch_size, beta)
    loss_total = 0.0
    td_all = np.zeros(len(idx))
    zero_grads(net.parameters())
    groups: dict[bytes, list[int]] = {}
    for j, tr in enumerate(transitions):
        groups.setdefault(tr.layout, []).append(j)
    for members in groups.values():
        sub = [transitions[j] for j in members]
        batch_next = stack_observations(
            [t.next_obs for t in sub], [t.next_mask for t in sub]
        )
        rewards = np.array([t.reward for t in sub])
        dones = np.array([float(t.done) for t in sub])
        y = td_targets(batch_next, rewards, dones, net, target_net, cfg.gamma, cfg.double)
        batch = stack_observations([t.obs for t in sub], [t.mask for t in sub])
        q = net.forward(batch, FROZEN_ZERO)
        q_taken = ad.select_actions(q, np.array([t.action for t in sub]))
        err = ad.sub(q_taken, Tensor(y))
        w = weights[members] / len(idx)
        loss = ad.total(ad.mul(Tensor(w), ad.mul(err, err)))
        loss.backward()
        loss_total += float(loss.data)
        td_all[members] = err.data
    optimizer.step()
    buffer.update_priorities(idx, td_all)
    return loss_total, idx, td_all


# ---------------------------------------------------------------------------
# Episode runner


@dataclass
class EpisodeResult:
    metrics: production.EpisodeMetrics
    episode_return: float
    transitions: list
    selected_outside_safe: int
    decisions: int
    trace: production.EpisodeTrace


def _readiness_sets(world) -> SafeSets:
    startable = tuple(world.startable_tasks())
    n = len(world.humans)
    return SafeSets(e_safe=tuple(startable for _ in range(n)), a_safe=startable + (WAIT,))


def run_episode(
    scenario,
    train_cfg: TrainConfig,
    reward_cfg: production.RewardConfig,
    noise_cfg: NoiseConfig,
    seed: int,
    policy,
    collect: bool = True,
    limits=None,
    on_step=None,
    on_transition=None,
) -> EpisodeResult:
    """Drive one episode; ``policy(obs, mask_bool) -> action index``.

    The runner owns the estimator bank, safe-set construction, decision-point
    detection, reward accumulation between decisions, and (for unmasked
    baselines) the violation-onset reward penalty.
    """
    ids = action_ids(scenario)
    wait_idx = len(ids) - 1
    init = randomize_episode(scenario, seed)
    bank = EstimatorBank(
        scenario,
        init,
        noise_cfg,
        filter_kind=train_cfg.filter_kind,
        n_particles=train_cfg.n_particles,
        seed=seed + 101,
    )
    world = production.reset(scenario, init, reward_cfg, seed + 202, noise=noise_cfg)
    if limits is not None:
        per_human = list(limits) if hasattr(limits, "__len__") else [limits] * len(world.humans)
        world.limits = per_human
        world.trace.fatigue_limits = tuple(per_human)

    episode_return = 0.0
    transitions: list[Transition] = []
    pending = None  # [obs, mask, action, accumulated reward]
    outside = 0
    decisions = 0
    last_a_safe = None
    last_was_wait = False
    wait_ticks = 0

    def current_sets() -> SafeSets:
        if not train_cfg.masked:
            return _readiness_sets(world)
        return build_safe_sets(
            scenario,
            world.startable_tasks(),
            bank,
            list(world.last_measurements),
            world.limits,
            world.idle_humans(),
            rate_margin=train_cfg.rate_margin,
        )

    def close_pending(next_obs, next_mask, done):
        nonlocal pending
        if pending is None or not collect:
            return
        transition = Transition(
            obs=pending[0],
            mask=pending[1],
            action=pending[2],
            reward=pending[3],
            next_obs=next_obs,
            next_mask=next_mask,
            done=done,
            layout=pending[0].kinds.tobytes(),
        )
        if on_transition is not None:
            on_transition(transition)
        else:
            transitions.append(transition)

    while not world.done:
        sets = current_sets()
        has_choice = len(sets.a_safe) > 1
        stale_wait = last_was_wait and wait_ticks >= train_cfg.wait_patience
        is_decision = has_choice and (
            not last_was_wait or stale_wait or sets.a_safe != last_a_safe
        )

        action_env = WAIT
        if is_decision:
            decisions += 1
            obs = production.observe(world, bank)
            mask = sets.mask(ids)
            action_idx = policy(obs, mask)
            if not mask[action_idx]:
                outside += 1
                action_idx = wait_idx
            repeat_wait = (
                pending is not None and pending[2] == wait_idx and action_idx == wait_idx
            )
            if not repeat_wait:
                # Consecutive WAIT picks merge into one transition, so a long
                # rest is a single bootstrap hop rather than a chain.
                close_pending(obs, mask, done=False)
                pending = [obs, mask, action_idx, 0.0]
            last_a_safe = sets.a_safe
            last_was_wait = action_idx == wait_idx
            wait_ticks = 0
            if action_idx != wait_idx:
                try:
                    action_env = allocate(ids[action_idx], sets, world, scenario.grid)
                except AllocationUnavailable:
                    action_env = WAIT
                    last_was_wait = True

        world, reward, done, info = production.step(world, action_env)
        if last_was_wait:
            wait_ticks += 1
        if not train_cfg.masked and info["violation_onsets"]:
            reward -= train_cfg.penalty_weight * info["violation_onsets"]
        episode_return += reward
        if pending is not None:
            pending[3] += reward
        for k in range(len(world.humans)):
            bank.update(k, info["statuses"][k], info["measurements"][k])
        if on_step is not None:
            on_step()

    if pending is not None and collect:
        terminal_obs = production.observe(world, bank)
        terminal_mask = np.zeros(len(ids), dtype=bool)
        terminal_mask[wait_idx] = True
        close_pending(terminal_obs, terminal_mask, done=True)

    return EpisodeResult(
        metrics=production.episode_metrics(world.trace),
        episode_return=episode_return,
        transitions=transitions,
        selected_outside_safe=outside,
        decisions=decisions,
        trace=world.trace,
    )


# ---------------------------------------------------------------------------
# Policies


def network_policy(net: QNetwork, mode: str = GREEDY, rng=None, explore_eps: float = 0.0):
    """Greedy or noisy-exploring policy over a Q-network.

    Exploration samples the noisy layers per decision. A small uniform
    floor (``explore_eps``) backs it up: at this scale the head's parameter
    noise alone cannot reliably break an untrained network's initial action
    preference, and it is the only exploration source for no-noisy variants.
    """
    rng = rng or np.random.default_rng(0)

    def policy(obs, mask):
        noise_mode = FROZEN_ZERO
        if mode == NOISY_EXPLORE:
            if rng.random() < explore_eps:
                return int(rng.choice(np.flatnonzero(mask)))
            if net.cfg.noisy:
                net.resample_noise(rng)
                noise_mode = SAMPLED
        batch = stack_observations([obs], [mask.astype(np.float64)])
        q = net.forward(batch, noise_mode).data[0]
        return select_action(q, mask)

    return policy


def random_policy(seed=0):
    rng = np.random.default_rng(seed)

    def policy(obs, mask):
        return int(rng.choice(np.flatnonzero(mask)))

    return policy


# ---------------------------------------------------------------------------
# Training


@dataclass
class Checkpoint:
    online: dict
    target: dict
    train_steps: int
    env_steps: int
    config_digest: str
    rng_state: dict
    net_config: NetworkConfig


def default_network_config(scenario, **overrides) -> NetworkConfig:
    base = dict(
        n_actions=len(scenario.tasks) + 1,
        cont_width=production.cont_width(scenario),
        n_task_ids=len(scenario.tasks),
        n_subtask_ids=len(scenario.subtasks),
    )
    base.update(overrides)
    return NetworkConfig(**base)


@dataclass
class TrainingRun:
    checkpoint: Checkpoint
    curves: list  # per episode: dict of episode stats
    net: QNetwork
    target: QNetwork
    outside_safe_total: int


def run_training(
    scenario,
    train_cfg: TrainConfig,
    reward_cfg: production.RewardConfig,
    noise_cfg: NoiseConfig,
    net_cfg: NetworkConfig,
    seed: int = 0,
    progress=None,
) -> TrainingRun:
    """Full training loop: decision-point rollouts + periodic PER updates."""
    from dataclasses import replace

    _limit_blas_threads()
    if not train_cfg.dueling and net_cfg.head != "plain":
        net_cfg = replace(net_cfg, head="plain")
    net = QNetwork(net_cfg, seed=seed)
    target = QNetwork(net_cfg, seed=seed)
    restore_arrays = {k: p.data.copy() for k, p in net.parameters().items()}
    restore_into(target, restore_arrays)
    optimizer = Adam(net.parameters(), train_cfg.learn_rate)
    buffer = ReplayBuffer(train_cfg.buffer_capacity, train_cfg.per_alpha, train_cfg.per_eps, seed=seed + 7)
    rng = np.random.default_rng(seed + 11)
    policy = network_policy(net, NOISY_EXPLORE, rng, train_cfg.explore_eps)

    curves = []
    state = {"env_steps": 0, "train_steps": 0, "since_burst": 0, "episode": 0}

    def maybe_train():
        state["env_steps"] += 1
        state["since_burst"] += 1
        if state["env_steps"] < train_cfg.warmup_steps:
            return
        if state["since_burst"] < train_cfg.train_period:
            return
        if len(buffer) < train_cfg.batch_size:
            return
        state["since_burst"] = 0
        beta = train_cfg.per_beta0 + (train_cfg.per_beta1 - train_cfg.per_beta0) * min(
            1.0, state["episode"] / max(train_cfg.episodes - 1, 1)
        )
        for _ in range(train_cfg.train_burst):
            train_step(buffer, net, target, optimizer, train_cfg, beta)
            state["train_steps"] += 1
            if state["train_steps"] % train_cfg.target_period == 0:
                restore_into(target, {k: p.data.copy() for k, p in net.parameters().items()})

    outside_total = 0
    total_episodes = train_cfg.episodes
    for episode in range(total_episodes):
        state["episode"] = episode
        result = run_episode(
            scenario,
            train_cfg,
            reward_cfg,
            noise_cfg,
            seed=seed * 1_000_003 + episode,
            policy=policy,
            on_step=maybe_train,
            on_transition=buffer.push,
        )
        outside_total += result.selected_outside_safe
        curves.append(
            {
                "episode": episode,
                "return": result.episode_return,
                "makespan": result.metrics.makespan,
                "overwork": result.metrics.overwork,
                "progress": result.metrics.progress,
                "noisy_explore": int(net_cfg.noisy),
            }
        )
        if progress is not None:
            progress(episode, curves[-1])

    digest = config_hash(train_cfg, reward_cfg, noise_cfg, net_cfg)
    checkpoint = Checkpoint(
        online={k: p.data.copy() for k, p in net.parameters().items()},
        target={k: p.data.copy() for k, p in target.parameters().items()},
        train_steps=state["train_steps"],
        env_steps=state["env_steps"],
        config_digest=digest,
        rng_state=rng.bit_generator.state,
        net_config=net_cfg,
    )
    return TrainingRun(
        checkpoint=checkpoint,
        curves=curves,
        net=net,
        target=target,
        outside_safe_total=outside_total,
    )


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    import json
    from dataclasses import asdict

    params = {f"online.{k}": v for k, v in checkpoint.online.items()}
    params.update({f"target.{k}": v for k, v in checkpoint.target.items()})
    meta = {
        "train_steps": checkpoint.train_steps,
        "env_steps": checkpoint.env_steps,
        "config_digest": checkpoint.config_digest,
        "rng_state": json.loads(json.dumps(checkpoint.rng_state, default=int)),
        "net_config": asdict(checkpoint.net_config),
    }
    save_params(path, params, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = load_params(path)
    online = {k[len("online.") :]: v for k, v in arrays.items() if k.startswith("online.")}
    target = {k[len("target.") :]: v for k, v in arrays.items() if k.startswith("target.")}
    return Checkpoint(
        online=online,
        target=target,
        train_steps=meta["train_steps"],
        env_steps=meta["env_steps"],
        config_digest=meta["config_digest"],
        rng_state=meta["rng_state"],
        net_config=NetworkConfig(**meta["net_config"]),
    )


def network_from_checkpoint(checkpoint: Checkpoint) -> QNetwork:
    net = QNetwork(checkpoint.net_config, seed=0)
    restore_into(net, checkpoint.online)
    return net


def evaluate(
    scenario,
    net: QNetwork,
    train_cfg: TrainConfig,
    reward_cfg: production.RewardConfig,
    noise_cfg: NoiseConfig,
    seeds,
    limits=None,
) -> list[EpisodeResult]:
    """Greedy evaluation episodes (frozen-zero noise), no replay collection."""
    _limit_blas_threads()
    policy = network_policy(net, GREEDY)
    return [
        run_episode(
            scenario,
            train_cfg,
            reward_cfg,
            noise_cfg,
            seed=seed,
            policy=policy,
            collect=False,
            limits=limits,
        )
        for seed in seeds
    ]
