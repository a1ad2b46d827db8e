import numpy as np
import pytest

from ergosched.scenario import (
    ScenarioError,
    default_scenario,
    load_scenario,
    parse_scenario,
    randomize_episode,
    validate_scenario,
    with_entity_counts,
    with_order,
)

MINI = """
[grid]
.....
.....
.....

[subtasks]
a | lift | human | 3 | 0,0
b | move | robot | 2 | 1,1

[tasks]
tA | lifting | a
tB | moving  | b

[deps]
tA -> tB

[fatigue]
lambda a = 0.2
mu free = 0.015
mu waiting = 0.015
mu walking = 0.006
delta_eff = 0.3

[order]
products = 1
humans = 1..1
robots = 1..1
cages = 1
"""


class TestParsing:
    def test_mini_roundtrip(self):
        s = parse_scenario(MINI)
        assert [t.id for t in s.tasks] == ["tA", "tB"]
        assert s.subtask("a").static_time == 3
        assert s.product_order == 1

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "mini.scn"
        path.write_text(MINI, encoding="utf-8")
        s = load_scenario(path)
        assert len(s.subtasks) == 2

    def test_unknown_subtask_named_in_error(self):
        bad = MINI.replace("tA | lifting | a", "tA | lifting | zz")
        with pytest.raises(ScenarioError, match="zz"):
            parse_scenario(bad)

    def test_two_cycle_rejected(self):
        bad = MINI.replace("tA -> tB", "tA -> tB\ntB -> tA")
        with pytest.raises(ScenarioError, match="cycle"):
            parse_scenario(bad)

    def test_subtask_on_obstacle_rejected(self):
        bad = MINI.replace(".....\n.....\n.....", "#....\n.....\n.....")
        with pytest.raises(ScenarioError, match="a"):
            parse_scenario(bad)

    def test_missing_work_rate_rejected(self):
        bad = MINI.replace("lambda a = 0.2\n", "")
        with pytest.raises(ScenarioError, match="a"):
            parse_scenario(bad)

    def test_unknown_order_key_rejected(self):
        bad = MINI.replace("products = 1", "products = 1\nwidgets = 3")
        with pytest.raises(ScenarioError, match="widgets"):
            parse_scenario(bad)

    def test_unknown_fatigue_key_rejected(self):
        bad = MINI.replace("delta_eff = 0.3", "delta_eff = 0.3\nzeta q = 1")
        with pytest.raises(ScenarioError, match="zeta"):
            parse_scenario(bad)

    def test_unknown_section_rejected(self):
        with pytest.raises(ScenarioError, match="extras"):
            parse_scenario(MINI + "\n[extras]\nx = 1\n")


class TestDefaultScenario:
    def test_table_values(self):
        s = default_scenario()
        ft = s.fatigue_table
        assert ft.work_rate["s04"] == 0.36  # loading flange, station 1
        assert ft.recovery_rate["walking"] == 0.006
        assert ft.recovery_rate["free"] == 0.015
        assert ft.delta_eff == 0.3
        assert ft.human_type_multipliers == {"weak": 1.2, "normal": 1.0, "strong": 0.8}

    def test_ten_human_subtasks_with_expected_rates(self):
        s = default_scenario()
        human_subs = s.human_subtask_ids()
        assert len(human_subs) == 10
        rates = sorted(s.fatigue_table.work_rate[sid] for sid in human_subs)
        assert rates == sorted([0.12, 0.18, 0.12, 0.18, 0.36, 0.36, 0.45, 0.45, 0.03, 0.45])

    def test_dependency_graph_valid(self):
        # validate_scenario already runs at load; re-validate explicitly.
        s = default_scenario()
        assert validate_scenario(s) is s

    def test_two_welding_stations(self):
        s = default_scenario()
        stations = {st.location for st in s.subtasks if st.name.startswith("weld_")}
        assert len(stations) == 2


class TestRandomizeEpisode:
    def test_determinism(self):
        s = default_scenario()
        assert randomize_episode(s, 7) == randomize_episode(s, 7)

    def test_counts_uniform(self):
        s = default_scenario()
        counts = {1: 0, 2: 0, 3: 0}
        n = 10_000
        for seed in range(n):
            init = randomize_episode(s, seed)
            counts[len(init.humans)] += 1
        # 3-sigma band around n/3 for a uniform multinomial component
        sigma = (n * (1 / 3) * (2 / 3)) ** 0.5
        for c in counts.values():
            assert abs(c - n / 3) < 3 * sigma

    def test_weak_type_scales_all_rates(self):
        s = default_scenario()
        for seed in range(200):
            init = randomize_episode(s, seed)
            for k, h in enumerate(init.humans):
                if h.type_name == "weak":
                    for sid in s.human_subtask_ids():
                        assert init.work_rate(s, k, sid) == pytest.approx(
                            s.fatigue_table.work_rate[sid] * 1.2
                        )
                    return
        pytest.fail("no weak human drawn in 200 seeds")

    def test_positions_free_and_distinct(self):
        s = default_scenario()
        for seed in range(50):
            init = randomize_episode(s, seed)
            cells = [h.position for h in init.humans]
            assert len(set(cells)) == len(cells)
            for cell in cells + list(init.robot_positions) + list(init.cage_positions):
                assert s.grid.is_free(cell)

    def test_spawn_failure(self):
        tiny = MINI.replace("cages = 1", "cages = 40")
        with pytest.raises(ScenarioError, match="spawn"):
            randomize_episode(parse_scenario(tiny), 0)


class TestOverrides:
    def test_with_order(self):
        s = default_scenario()
        assert with_order(s, 2).product_order == 2
        assert s.product_order == 8

    def test_with_entity_counts(self):
        s = with_entity_counts(default_scenario(), (1, 1), (1, 1))
        for seed in range(10):
            init = randomize_episode(s, seed)
            assert len(init.humans) == 1
            assert len(init.robot_positions) == 1

    def test_structure_independent_of_rate_scale(self):
        # Scaling accumulation rates must not touch ordering or dependencies.
        s = default_scenario()
        scaled = parse_scenario(
            open_default().replace("lambda s04 = 0.36", "lambda s04 = 0.72")
        )
        assert [t.id for t in scaled.tasks] == [t.id for t in s.tasks]
        assert scaled.dependency_edges == s.dependency_edges
        assert [st.id for st in scaled.subtasks] == [st.id for st in s.subtasks]


def open_default() -> str:
    from importlib import resources

    return resources.files("ergosched.data").joinpath("duct_factory.scn").read_text("utf-8")
