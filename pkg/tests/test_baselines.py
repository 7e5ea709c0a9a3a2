import json

import numpy as np
import pytest

from gridshed.baselines import (DqnController, DqnHyperparameters, DqnTrainer,
                                NoControl, RuleController)
from gridshed.env import HOLD, SHED
from gridshed.grid import load_system
from gridshed.madrl import one_hot
from gridshed.nn import finite_difference_grads, max_rel_error

SMALL_HP = dict(hidden=8, batch_size=4, buffer_size=32, warmup=4)


def small_dqn(seed=0, **overrides):
    hp = DqnHyperparameters(**{**SMALL_HP, **overrides})
    return DqnTrainer(load_system("toy2"), hp, seed=seed)


def info(devs, ucum, t=3.0):
    return {"t": t, "ucum": ucum, "last_interval_min_dev": devs,
            "failed": False}


class TestNoControl:
    def test_always_holds(self):
        ctl = NoControl()
        ctl.reset(load_system("toy2"))
        assert ctl.act([None, None], info([0.1, -0.5], [0.0, 0.0])) == [HOLD,
                                                                        HOLD]


class TestRuleController:
    def setup_method(self):
        self.ctl = RuleController()
        self.ctl.reset(load_system("toy2"))

    def test_holds_when_satisfied(self):
        assert self.ctl.act(None, info([0.05, 0.0], [0.0, 0.0])) == [HOLD,
                                                                     HOLD]

    def test_sheds_on_violation(self):
        assert self.ctl.act(None, info([-0.01, 0.2], [0.0, 0.0])) == [SHED,
                                                                      HOLD]

    def test_respects_cap(self):
        assert self.ctl.act(None, info([-0.1, -0.1], [0.5, 0.4])) == [HOLD,
                                                                      SHED]

    def test_persistent_violation_reaches_cap(self):
        ucum = [0.0, 0.0]
        for _ in range(7):
            acts = self.ctl.act(None, info([-0.1, 0.1], ucum))
            ucum = [round(u + 0.1 * a, 10) for u, a in zip(ucum, acts)]
        assert ucum == [0.5, 0.0]

    def test_nan_history_means_hold(self):
        acts = self.ctl.act(None, info([float("nan")] * 2, [0.0, 0.0]))
        assert acts == [HOLD, HOLD]


class TestDqnUpdate:
    def test_terminal_and_gamma_zero_targets(self):
        for hp_kw in ({"gamma": 0.0},):
            tr = small_dqn(**hp_kw)
            rng = np.random.default_rng(0)
            for _ in range(4):
                obs = [rng.normal(size=d) for d in tr.env.obs_dims]
                nxt = [rng.normal(size=d) for d in tr.env.obs_dims]
                tr.buffer.add((obs, [0, 1], [5.0, -3.0], nxt, 0.0))
            obs_b = [np.stack([t[0][j] for t in tr.buffer._data])
                     for j in range(2)]
            act_b = np.array([t[1] for t in tr.buffer._data])
            # expected TD loss with gamma=0: y = scale * r
            expected = 0.0
            for j in range(2):
                q = tr.nets[j].forward(obs_b[j])
                q_taken = np.take_along_axis(q, act_b[:, j, None], 1)[:, 0]
                y = tr.hp.reward_scale * np.array(
                    [t[2][j] for t in tr.buffer._data])
                expected += float(np.mean((q_taken - y) ** 2))
            loss = tr.update()
            assert loss == pytest.approx(expected, rel=1e-12)

    def test_gradients_match_finite_differences(self):
        tr = small_dqn(seed=3)
        rng = np.random.default_rng(1)
        batch = 4
        obs = [rng.normal(size=(batch, d)) for d in tr.env.obs_dims]
        act = rng.integers(0, 2, size=(batch, 2))
        ys = [rng.normal(size=batch) for _ in range(2)]
        grads, params = [], []
        for j in range(2):
            q_all, cache = tr.nets[j].forward_cached(obs[j])
            q_taken = np.take_along_axis(q_all, act[:, j, None], 1)[:, 0]
            dq = one_hot(act[:, j], 2) * (2.0 * (q_taken - ys[j])
                                          / batch)[:, None]
            grads += tr.nets[j].backward_cached(cache, dq).arrays()
            params += tr.nets[j].param_arrays()

        def loss():
            tot = 0.0
            for j in range(2):
                q = tr.nets[j].forward(obs[j])
                q_t = np.take_along_axis(q, act[:, j, None], 1)[:, 0]
                tot += float(np.mean((q_t - ys[j]) ** 2))
            return tot

        numeric = finite_difference_grads(loss, params, h=1e-6)
        assert max_rel_error(grads, numeric) < 1e-4


class TestEpsilonSchedule:
    def test_linear_decay_over_half(self):
        tr = small_dqn()
        assert tr.epsilon(0, 1000) == pytest.approx(1.0)
        assert tr.epsilon(250, 1000) == pytest.approx(0.525)
        assert tr.epsilon(500, 1000) == pytest.approx(0.05)
        assert tr.epsilon(999, 1000) == pytest.approx(0.05)


class TestDqnTraining:
    def test_zero_episodes(self):
        hist = small_dqn().train(0)
        assert hist["returns"] == []

    def test_deterministic(self):
        h1 = small_dqn(seed=4).train(6)
        h2 = small_dqn(seed=4).train(6)
        assert h1["returns"] == h2["returns"]
        assert h1["loss"] == h2["loss"]

    def test_checkpoint_resume_bitwise(self, tmp_path):
        tr = small_dqn(seed=5)
        tr.train(6)
        path = tmp_path / "dqn.json"
        tr.save(path)
        tr2 = DqnTrainer.load(tr.system, path)
        assert tr.train(4)["returns"] == tr2.train(4)["returns"]
        assert json.dumps(tr.to_dict()) == json.dumps(tr2.to_dict())

    def test_sac_checkpoint_rejected(self, tmp_path):
        from gridshed.madrl import Hyperparameters, SacTrainer
        sys_ = load_system("toy2")
        sac = SacTrainer(sys_, Hyperparameters(hidden=8, embed_dim=4,
                                               attn_dim=3, batch_size=4,
                                               buffer_size=32), seed=0)
        path = tmp_path / "sac.json"
        sac.save(path)
        with pytest.raises(ValueError):
            DqnTrainer.load(sys_, path)


class TestDqnController:
    def test_greedy(self):
        tr = small_dqn()
        ctl = DqnController(tr)
        ctl.reset(tr.system)
        obs = [np.zeros(d) for d in tr.env.obs_dims]
        assert ctl.act(obs, {}) == tr.act(obs, epsilon=0.0)
