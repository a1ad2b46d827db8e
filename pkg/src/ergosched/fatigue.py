"""Fatigue-recovery dynamics and the stochastic execution-time model.

Fatigue is a dimensionless level in [0, 1). Working one tick moves it
exponentially toward 1 at the subtask's accumulation rate; resting one tick
contracts it exponentially toward 0 at the rest mode's recovery rate.
Elevated fatigue stretches completion times, which feeds back into how many
working ticks a subtask needs.

All stochastic helpers are pure functions of their inputs and a seed (or an
already-constructed ``numpy`` generator), so every caller can replay them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

WORKING = "working"
RESTING = "resting"

#: Lower clamp applied after multiplicative Gaussian perturbation of a rate.
PARAM_FLOOR = 1e-6

#: Hard cap on simulated subtask length; hitting it means the inputs are broken.
MAX_SUBTASK_TICKS = 1_000_000

#: Completion-degree slack absorbing float accumulation error, so that e.g.
#: tau additions of 1/tau count as done. Part of the subtask-time contract.
COMPLETION_EPS = 1e-9


class FatigueDomainError(ValueError):
    """Raised when a fatigue value or rate is outside its valid domain."""


@dataclass(frozen=True)
class NoiseConfig:
    """Noise magnitudes used across an experiment.

    sigma_init:     std-dev of the multiplicative noise on initial parameters
    sigma_time:     std-dev of the multiplicative completion-time noise
    sigma_particle: half-width fraction of the particle init interval
    sigma_m:        std-dev of the per-tick fatigue measurement
    """

    sigma_init: float = 0.2
    sigma_time: float = 0.1
    sigma_particle: float = 0.3
    sigma_m: float = 5e-5

    def __post_init__(self):
        for name in ("sigma_init", "sigma_time", "sigma_particle", "sigma_m"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _check_fatigue(value: float) -> None:
    if not (0.0 <= value < 1.0):
        raise FatigueDomainError(f"fatigue must lie in [0, 1), got {value!r}")


def work_step(fatigue: float, rate: float) -> float:
    """One working tick: F' = F + (1 - F) * (1 - e^-rate)."""
    _check_fatigue(fatigue)
    if rate <= 0:
        raise FatigueDomainError(f"work rate must be > 0, got {rate!r}")
    return fatigue + (1.0 - fatigue) * (1.0 - math.exp(-rate))


def rest_step(fatigue: float, rate: float) -> float:
    """One resting tick: F' = F * e^-rate."""
    _check_fatigue(fatigue)
    if rate <= 0:
        raise FatigueDomainError(f"recovery rate must be > 0, got {rate!r}")
    return fatigue * math.exp(-rate)


def fatigue_step(fatigue: float, mode: str, rate: float) -> float:
    """Advance fatigue one tick in ``mode`` (WORKING or RESTING)."""
    if mode == WORKING:
        return work_step(fatigue, rate)
    if mode == RESTING:
        return rest_step(fatigue, rate)
    raise ValueError(f"unknown fatigue mode {mode!r}")


def scaled_completion_time(tau: float, delta_eff: float, fatigue: float) -> tuple[float, float]:
    """Fatigue-stretched completion time and the per-tick completion fraction.

    Returns ``(tau * (1 + delta_eff * ln(1 + F)), 1 / that)``. The efficiency
    is non-increasing in fatigue; ``delta_eff = 0`` disables the coupling.
    """
    if tau < 1:
        raise ValueError(f"static completion time must be >= 1, got {tau!r}")
    if delta_eff < 0:
        raise ValueError(f"delta_eff must be >= 0, got {delta_eff!r}")
    _check_fatigue(fatigue)
    stretched = tau * (1.0 + delta_eff * math.log1p(fatigue))
    return stretched, 1.0 / stretched


def simulate_subtask(
    fatigue0: float,
    tau: float,
    work_rate: float,
    delta_eff: float,
) -> tuple[int, float]:
    """Tick-by-tick subtask execution; returns (ticks needed, final fatigue).

    Each tick first accumulates fatigue, then adds the instantaneous
    efficiency to the completion degree; the subtask ends once the degree
    reaches 1, the final partial tick counting as a full tick. Deterministic.
    """
    _check_fatigue(fatigue0)
    if tau < 1:
        raise ValueError(f"static completion time must be >= 1, got {tau!r}")
    if work_rate <= 0:
        raise FatigueDomainError(f"work rate must be > 0, got {work_rate!r}")
    if delta_eff < 0:
        raise ValueError(f"delta_eff must be >= 0, got {delta_eff!r}")

    gain = 1.0 - math.exp(-work_rate)
    fatigue = fatigue0
    progress = 0.0
    ticks = 0
    done = 1.0 - COMPLETION_EPS
    while progress < done:
        fatigue += (1.0 - fatigue) * gain
        progress += 1.0 / (tau * (1.0 + delta_eff * math.log1p(fatigue)))
        ticks += 1
        if ticks > MAX_SUBTASK_TICKS:
            raise RuntimeError(
                f"subtask did not finish within {MAX_SUBTASK_TICKS} ticks "
                f"(tau={tau}, rate={work_rate}, delta_eff={delta_eff})"
            )
    return ticks, fatigue


def perturb_params(true_params: dict, sigma_init: float, seed) -> dict:
    """Multiplicative Gaussian perturbation of a parameter table.

    Each value becomes ``p * (1 + n)`` with ``n ~ N(0, sigma_init^2)``,
    clipped from below so the result stays positive.
    """
    if sigma_init < 0:
        raise ValueError("sigma_init must be >= 0")
    rng = _as_rng(seed)
    out = {}
    for key, value in true_params.items():
        noisy = value * (1.0 + rng.normal(0.0, sigma_init))
        out[key] = max(noisy, PARAM_FLOOR)
    return out


def randomize_exec_time(subtime: int, sigma_time: float, t_travel: int, seed) -> int:
    """Actual execution ticks: round(subtime * (1 + n)) + travel, floored."""
    if subtime < 1:
        raise ValueError("subtime must be >= 1")
    if t_travel < 0:
        raise ValueError("t_travel must be >= 0")
    if sigma_time < 0:
        raise ValueError("sigma_time must be >= 0")
    rng = _as_rng(seed)
    noisy = round(subtime * (1.0 + rng.normal(0.0, sigma_time)))
    return max(1, noisy) + t_travel


def measure_fatigue(fatigue: float, sigma_m: float, seed) -> float:
    """Noisy fatigue reading: z ~ N(F, sigma_m^2), deliberately unclipped."""
    if sigma_m < 0:
        raise ValueError("sigma_m must be >= 0")
    rng = _as_rng(seed)
    return fatigue + rng.normal(0.0, sigma_m)
