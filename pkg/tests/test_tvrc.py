import numpy as np
import pytest

from gridshed.env import HOLD, SHED, ShedEnv
from gridshed.grid import Scenario, load_system
from gridshed.tvrc import (CaseRecord, aggregate_cases, build_state,
                           deviation, envelope_threshold, evaluate_suite,
                           mean_voltage_deviation, reward, shed_cost)


class TestEnvelope:
    def test_window_levels(self):
        tc = 2.0
        for offset, level in ((0.0, 0.70), (0.33, 0.80), (0.5, 0.90),
                              (1.5, 0.95)):
            assert envelope_threshold(tc + offset, tc) == level

    def test_boundaries_closed_on_left(self):
        tc = 0.0
        assert envelope_threshold(0.33 - 1e-6, tc) == 0.70
        assert envelope_threshold(0.33, tc) == 0.80
        assert envelope_threshold(0.5 - 1e-6, tc) == 0.80
        assert envelope_threshold(0.5, tc) == 0.90
        assert envelope_threshold(1.5 - 1e-6, tc) == 0.90
        assert envelope_threshold(1.5, tc) == 0.95
        assert envelope_threshold(100.0, tc) == 0.95

    def test_pre_clearance_rejected(self):
        with pytest.raises(ValueError):
            envelope_threshold(0.9, 1.0)

    def test_deviation_examples(self):
        tc = 5.0
        assert abs(deviation(0.75, tc + 0.1, tc) - 0.05) < 1e-12
        assert abs(deviation(0.85, tc + 0.6, tc) + 0.05) < 1e-12
        assert deviation(0.95, tc + 2.0, tc) == 0.0

    def test_deviation_vectorized(self):
        tc = 1.0
        out = deviation(np.array([0.7, 0.8]), tc, tc)
        assert np.allclose(out, [0.0, 0.1], atol=1e-12)


class TestBuildState:
    def test_constant_history(self):
        out = build_state(np.full((5, 1), 0.05), 3)
        assert np.allclose(out, [0.05, 0.05, 0.05])

    def test_zero_padding(self):
        out = build_state(np.array([[0.1], [0.2]]), 4)
        assert np.allclose(out, [0.0, 0.0, 0.1, 0.2])

    def test_two_bus_blocks_newest_last(self):
        hist = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
        out = build_state(hist, 2)
        assert np.allclose(out, [2.0, 3.0, 20.0, 30.0])

    def test_empty_history(self):
        out = build_state(np.zeros((0, 2)), 3)
        assert out.shape == (6,) and not out.any()


class TestReward:
    def test_violation_gives_penalty(self):
        devs = np.array([[0.1, 0.2], [-0.001, 0.3]])
        assert reward(devs, 0.0, 100.0, 1000.0) == -1000.0

    def test_remaining_load(self):
        devs = np.full((10, 2), 0.05)
        assert reward(devs, 0.2, 100.0, 1000.0) == 80.0

    def test_no_shedding_full_load(self):
        assert reward(np.full((3, 1), 0.01), 0.0, 100.0, 1000.0) == 100.0

    def test_zero_boundary_is_not_violation(self):
        assert reward(np.zeros((2, 2)), 0.0, 100.0, 1000.0) == 100.0


class TestShedCost:
    def test_paper_form(self):
        assert shed_cost([0.1, 0.0], [100.0, 200.0]) == 10.0

    def test_zero_and_full(self):
        assert shed_cost([0.0, 0.0], [100.0, 200.0]) == 0.0
        assert shed_cost([1.0, 1.0], [100.0, 200.0]) == 300.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            shed_cost([1.2], [100.0])


class TestMeanDeviation:
    def test_uniform(self):
        assert mean_voltage_deviation([0.1, 0.1, 0.1, 0.1]) == pytest.approx(0.1)

    def test_signed(self):
        assert mean_voltage_deviation([0.2, -0.1]) == pytest.approx(0.05)

    def test_single_bus(self):
        assert mean_voltage_deviation([-0.1883]) == pytest.approx(-0.1883)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_voltage_deviation([])


def case(cid, success, failure, shed, vdev):
    return CaseRecord(cid, 0, success, failure, shed, vdev)


class TestAggregation:
    def test_three_of_four(self):
        cases = [case(0, True, False, 10.0, 0.1),
                 case(1, True, False, 0.0, 0.2),
                 case(2, True, False, 20.0, 0.0),
                 case(3, False, False, 10.0, -0.1)]
        rep = aggregate_cases(cases)
        assert rep.r_tvrc == 75.0
        assert rep.p_dev == pytest.approx(10.0)
        assert rep.v_dev == pytest.approx(0.05)
        assert rep.r_fal == 0.0
        assert rep.n_test == 4

    def test_all_failures(self):
        cases = [case(i, False, True, 0.0, float("nan")) for i in range(3)]
        rep = aggregate_cases(cases)
        assert rep.r_fal == 100.0 and rep.r_tvrc == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_cases([])


class ScriptedController:
    """Plays back a fixed action list every episode."""

    def __init__(self, actions):
        self.actions = actions

    def reset(self, system):
        pass

    def act(self, obs, info):
        return self.actions


class CrashingController(ScriptedController):
    def act(self, obs, info):
        raise RuntimeError("boom")


class TestEvaluateSuite:
    def setup_method(self):
        self.system = load_system("toy2")

    def benign(self, seed=0):
        f = self.system.fault
        return Scenario(load_scale=1.0, line=0, t_start=f.start_time,
                        duration=0.06, conductance=0.0, seed=seed)

    def test_benign_suite_no_shed(self):
        rep = evaluate_suite(ScriptedController([HOLD, HOLD]), self.system,
                             [self.benign(i) for i in range(3)])
        assert rep.r_tvrc == 100.0 and rep.p_dev == 0.0 and rep.r_fal == 0.0

    def test_controller_exception_counts_as_failure(self):
        rep = evaluate_suite(CrashingController([]), self.system,
                             [self.benign()])
        assert rep.r_fal == 100.0 and rep.r_tvrc == 0.0

    def test_shed_percentage_accounted(self):
        rep = evaluate_suite(ScriptedController([SHED, HOLD]), self.system,
                             [self.benign()])
        # four control steps, one agent shedding 10% per step at one of
        # the two equally sized controllable loads
        assert rep.p_dev == pytest.approx(20.0)

    def test_deterministic(self):
        scs = [self.benign(i) for i in range(3)]
        a = evaluate_suite(ScriptedController([SHED, HOLD]), self.system, scs)
        b = evaluate_suite(ScriptedController([SHED, HOLD]), self.system, scs)
        assert [c.__dict__ for c in a.cases] == [c.__dict__ for c in b.cases]


class TestShedEnv:
    def setup_method(self):
        self.system = load_system("toy2")
        self.env = ShedEnv(self.system)

    def test_first_control_time(self):
        sc = self.system.default_scenario()
        assert self.env.first_control_time(sc) == 2.0
        assert self.env.n_control_steps(sc) == 4

    def test_obs_dims(self):
        assert self.env.obs_dims == [10, 10]

    def test_reset_then_step(self):
        sc = self.system.default_scenario()
        obs = self.env.reset(sc)
        assert len(obs) == 2 and obs[0].shape == (10,)
        nobs, rewards, done, info = self.env.step([SHED, HOLD])
        assert len(rewards) == 2
        assert info["ucum"] == [0.1, 0.0]
        assert info["t"] == 3.0
        assert not done

    def test_reward_is_remaining_load_when_clean(self):
        sc = Scenario(load_scale=0.95, line=0, t_start=1.0, duration=0.06,
                      conductance=0.0, seed=0)
        self.env.reset(sc)
        _, rewards, _, _ = self.env.step([SHED, HOLD])
        assert rewards == [90.0, 100.0]

    def test_episode_terminates_at_horizon(self):
        sc = self.system.default_scenario()
        self.env.reset(sc)
        done = False
        steps = 0
        while not done:
            _, _, done, _ = self.env.step([HOLD, HOLD])
            steps += 1
        assert steps == 4

    def test_wrong_action_count_rejected(self):
        self.env.reset(self.system.default_scenario())
        with pytest.raises(ValueError):
            self.env.step([HOLD])

    def test_cached_reset_matches_fresh(self):
        sc = self.system.default_scenario()
        a = self.env.reset(sc)
        b = ShedEnv(self.system, cache_resets=False).reset(sc)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
