import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ergosched.fatigue import (
    RESTING,
    WORKING,
    FatigueDomainError,
    NoiseConfig,
    fatigue_step,
    measure_fatigue,
    perturb_params,
    randomize_exec_time,
    rest_step,
    scaled_completion_time,
    simulate_subtask,
    work_step,
)


def replay_subtask(f0, tau, rate, delta_eff):
    # Straight-line reimplementation kept independent of the library loop,
    # sharing only the documented completion tolerance.
    f = f0
    progress = 0.0
    ticks = 0
    while progress < 1.0 - 1e-9:
        f = f + (1.0 - f) * (1.0 - math.exp(-rate))
        stretched = tau * (1.0 + delta_eff * math.log(1.0 + f))
        progress = progress + 1.0 / stretched
        ticks += 1
    return ticks, f


class TestFatigueStep:
    def test_rest_zero_fixed_point(self):
        assert fatigue_step(0.0, RESTING, 0.015) == 0.0

    def test_work_closed_form(self):
        # 0.5 + 0.5 * (1 - e^-0.12)
        assert fatigue_step(0.5, WORKING, 0.12) == pytest.approx(0.5565397816414213, abs=1e-9)

    def test_rest_closed_form(self):
        assert fatigue_step(0.5, RESTING, 0.015) == pytest.approx(0.4925559698015313, abs=1e-9)

    def test_domain_errors(self):
        with pytest.raises(FatigueDomainError):
            fatigue_step(1.0, WORKING, 0.1)
        with pytest.raises(FatigueDomainError):
            fatigue_step(-0.1, RESTING, 0.1)
        with pytest.raises(FatigueDomainError):
            fatigue_step(0.5, WORKING, 0.0)
        with pytest.raises(ValueError):
            fatigue_step(0.5, "napping", 0.1)

    @given(
        f=st.floats(min_value=0.0, max_value=0.999999),
        rate=st.floats(min_value=1e-6, max_value=5.0),
    )
    def test_work_maps_unit_interval_into_itself(self, f, rate):
        out = work_step(f, rate)
        assert 0.0 <= out < 1.0
        assert out >= f

    @given(
        f1=st.floats(min_value=0.0, max_value=0.99),
        f2=st.floats(min_value=0.0, max_value=0.99),
        rate=st.floats(min_value=1e-4, max_value=2.0),
    )
    def test_work_strictly_increasing_in_fatigue(self, f1, f2, rate):
        lo, hi = sorted((f1, f2))
        if hi - lo < 1e-9:
            return
        assert work_step(lo, rate) < work_step(hi, rate)

    @given(
        f=st.floats(min_value=0.0, max_value=0.999),
        rate=st.floats(min_value=1e-5, max_value=0.5),
        n=st.integers(min_value=1, max_value=50),
    )
    @settings(max_examples=200)
    def test_rest_composition(self, f, rate, n):
        # n unit rest steps == one rest step at n * rate.
        stepped = f
        for _ in range(n):
            stepped = rest_step(stepped, rate)
        combined = rest_step(f, n * rate)
        assert stepped == pytest.approx(combined, rel=1e-12, abs=1e-15)


class TestScaledCompletionTime:
    def test_zero_fatigue(self):
        assert scaled_completion_time(10, 0.3, 0.0) == (10.0, 0.1)

    def test_near_saturation(self):
        stretched, eff = scaled_completion_time(10, 0.3, 1.0 - 1e-12)
        assert stretched == pytest.approx(10 * (1 + 0.3 * math.log(2)), abs=1e-6)
        assert eff == pytest.approx(1.0 / (10 * (1 + 0.3 * math.log(2))), abs=1e-8)

    def test_no_coupling(self):
        assert scaled_completion_time(10, 0.0, 0.7) == (10.0, 0.1)

    @given(
        f1=st.floats(min_value=0.0, max_value=0.99),
        f2=st.floats(min_value=0.0, max_value=0.99),
    )
    def test_efficiency_non_increasing(self, f1, f2):
        lo, hi = sorted((f1, f2))
        _, eff_lo = scaled_completion_time(7, 0.3, lo)
        _, eff_hi = scaled_completion_time(7, 0.3, hi)
        assert eff_hi <= eff_lo


class TestSimulateSubtask:
    def test_vanishing_rate_limit(self):
        ticks, f_end = simulate_subtask(0.0, 10, 1e-10, 0.3)
        assert ticks == 10
        assert f_end < 1e-7

    def test_matches_independent_replay(self):
        ticks, f_end = simulate_subtask(0.0, 10, 0.12, 0.3)
        oracle_ticks, oracle_f = replay_subtask(0.0, 10, 0.12, 0.3)
        assert ticks == oracle_ticks
        assert f_end == pytest.approx(oracle_f, abs=1e-12)

    def test_monotone_in_initial_fatigue(self):
        hi, _ = simulate_subtask(0.8, 10, 0.12, 0.3)
        lo, _ = simulate_subtask(0.0, 10, 0.12, 0.3)
        assert hi >= lo

    @given(
        tau=st.integers(min_value=1, max_value=40),
        f0=st.floats(min_value=0.0, max_value=0.99),
        rate=st.floats(min_value=1e-3, max_value=1.0),
    )
    @settings(max_examples=100)
    def test_delta_zero_gives_static_time(self, tau, f0, rate):
        ticks, _ = simulate_subtask(f0, tau, rate, 0.0)
        assert ticks == tau


class TestPerturbParams:
    def test_zero_noise_identity(self):
        params = {"a": 0.36, "b": 0.015}
        assert perturb_params(params, 0.0, seed=1) == params

    def test_monte_carlo_moments(self):
        rng = np.random.default_rng(7)
        draws = np.array(
            [perturb_params({"l": 0.36}, 0.2, rng)["l"] for _ in range(10_000)]
        )
        assert abs(draws.mean() - 0.36) / 0.36 < 0.01
        assert abs(draws.std() - 0.072) / 0.072 < 0.05

    def test_positivity_clamp(self):
        # Enormous sigma guarantees negative raw draws somewhere in the batch.
        rng = np.random.default_rng(3)
        draws = [perturb_params({"l": 0.01}, 50.0, rng)["l"] for _ in range(200)]
        assert min(draws) == 1e-6
        assert all(d > 0 for d in draws)

    def test_seed_determinism(self):
        a = perturb_params({"x": 1.0, "y": 2.0}, 0.2, seed=42)
        b = perturb_params({"x": 1.0, "y": 2.0}, 0.2, seed=42)
        assert a == b


class TestRandomizeExecTime:
    def test_noise_free(self):
        assert randomize_exec_time(17, 0.0, 0, seed=0) == 17

    def test_monte_carlo_std(self):
        rng = np.random.default_rng(11)
        draws = np.array([randomize_exec_time(100, 0.1, 0, rng) for _ in range(10_000)])
        assert abs(draws.std() - 10.0) < 0.5

    def test_floor(self):
        # sigma large enough that some draws go negative; none may undercut 1 + travel.
        rng = np.random.default_rng(5)
        draws = [randomize_exec_time(1, 3.0, 4, rng) for _ in range(300)]
        assert min(draws) == 5

    def test_travel_added(self):
        assert randomize_exec_time(10, 0.0, 6, seed=0) == 16


class TestMeasureFatigue:
    def test_exact_when_noiseless(self):
        assert measure_fatigue(0.42, 0.0, seed=9) == 0.42

    def test_monte_carlo_std(self):
        rng = np.random.default_rng(13)
        draws = np.array([measure_fatigue(0.5, 5e-5, rng) for _ in range(10_000)])
        assert abs(draws.std() - 5e-5) / 5e-5 < 0.05

    def test_seeds_differ(self):
        assert measure_fatigue(0.5, 1e-3, seed=1) != measure_fatigue(0.5, 1e-3, seed=2)


def test_noise_config_defaults():
    cfg = NoiseConfig()
    assert cfg.sigma_init == 0.2
    assert cfg.sigma_time == 0.1
    assert cfg.sigma_particle == 0.3
    assert cfg.sigma_m == 5e-5
    with pytest.raises(ValueError):
        NoiseConfig(sigma_m=-1.0)
