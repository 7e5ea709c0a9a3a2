"""Comparison controllers: no-control, a rule-based relay scheme, and an
independent-learner multi-agent DQN.

The attention-free MA-SAC ablation is not a separate implementation; it is
`SacTrainer` with `use_attention=False`, which zeroes the attention summary
while keeping every other code path identical.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .env import HOLD, SHED, ShedEnv
from .grid import GridSystem
from .madrl import (ReplayBuffer, _stack_batch, moving_average, one_hot)
from .nn import Adam, DenseNet
from .scenarios import ScenarioStream

DQN_VERSION = 1


class NoControl:
    """Never sheds; the uncontrolled trajectory."""

    def reset(self, system):
        self.n_area = system.n_area

    def act(self, obs, info):
        return [HOLD] * self.n_area


class RuleController:
    """Local undervoltage relay: shed one round whenever the area saw an
    envelope violation during the last control interval, until the cap."""

    def reset(self, system):
        self.n_area = system.n_area
        self.cap = system.shedding.cap

    def act(self, obs, info):
        devs = info["last_interval_min_dev"]
        ucum = info["ucum"]
        actions = []
        for j in range(self.n_area):
            violated = np.isfinite(devs[j]) and devs[j] < 0.0
            actions.append(SHED if violated and ucum[j] < self.cap - 1e-12
                           else HOLD)
        return actions


@dataclass
class DqnHyperparameters:
    hidden: int = 128
    lr: float = 1e-4
    gamma: float = 0.99
    tau: float = 0.005
    reward_scale: float = 0.01
    buffer_size: int = 8000
    batch_size: int = 256
    warmup: int = 256
    scenario_pool: int = 256
    eps_start: float = 1.0
    eps_end: float = 0.05


class DqnTrainer:
    """Independent per-agent Q-learners with epsilon-greedy exploration.

    Epsilon decays linearly from eps_start to eps_end over the first half
    of the planned training episodes and stays at eps_end afterwards.
    """

    def __init__(self, system: GridSystem, hp: DqnHyperparameters = None,
                 seed: int = 0):
        self.system = system
        self.hp = hp or DqnHyperparameters()
        self.seed = int(seed)
        self.env = ShedEnv(system)
        self.n_agent = self.env.n_area
        self.n_actions = self.env.n_actions
        self.rng = np.random.default_rng([self.seed, 17])
        init = np.random.default_rng([self.seed, 19])
        h = self.hp.hidden
        self.nets = [DenseNet.create([d, h, h, self.n_actions], init)
                     for d in self.env.obs_dims]
        self.nets_t = [n.copy() for n in self.nets]
        self._init_optimizer()
        self.buffer = ReplayBuffer(self.hp.buffer_size)
        self.train_steps = 0
        self.episodes_done = 0

    def _init_optimizer(self):
        params = []
        for n in self.nets:
            params += n.param_arrays()
        self.opt = Adam(params, self.hp.lr)

    def act(self, obs, epsilon: float = 0.0):
        actions = []
        for net, o in zip(self.nets, obs):
            if epsilon > 0.0 and self.rng.random() < epsilon:
                actions.append(int(self.rng.integers(self.n_actions)))
            else:
                actions.append(int(np.argmax(net.forward(o))))
        return actions

    def update(self):
        hp = self.hp
        obs, act, rew, nxt, done = _stack_batch(
            self.buffer.sample(self.rng, hp.batch_size), self.n_agent)
        batch_n = done.shape[0]
        grads = []
        loss = 0.0
        for j in range(self.n_agent):
            q_next = self.nets_t[j].forward(nxt[j]).max(axis=1)
            y = hp.reward_scale * rew[:, j] + hp.gamma * (1.0 - done) * q_next
            q_all, cache = self.nets[j].forward_cached(obs[j])
            q_taken = np.take_along_axis(q_all, act[:, j, None], axis=1)[:, 0]
            err = q_taken - y
            loss += float(np.mean(err ** 2))
            dq = one_hot(act[:, j], self.n_actions) * (2.0 * err / batch_n)[:, None]
            grads += self.nets[j].backward_cached(cache, dq).arrays()
        self.opt.step(grads)
        tau = hp.tau
        for on, tn in zip(self.nets, self.nets_t):
            for o, t in zip(on.param_arrays(), tn.param_arrays()):
                t *= 1.0 - tau
                t += tau * o
        self.train_steps += 1
        return loss

    def epsilon(self, episode: int, total_episodes: int) -> float:
        hp = self.hp
        half = max(1, total_episodes // 2)
        frac = min(1.0, episode / half)
        return hp.eps_start + frac * (hp.eps_end - hp.eps_start)

    def train(self, episodes: int, stream: ScenarioStream = None,
              progress=None):
        if episodes < 0:
            raise ValueError("episodes must be >= 0")
        if stream is None:
            stream = ScenarioStream.from_system(self.system, self.seed)
        hp = self.hp
        returns, losses = [], []
        min_fill = max(hp.warmup, hp.batch_size)
        for ep in range(episodes):
            eps = self.epsilon(ep, episodes)
            sc = stream.scenario(self.episodes_done % hp.scenario_pool)
            obs = self.env.reset(sc)
            done = False
            ep_ret = 0.0
            while not done:
                actions = self.act(obs, epsilon=eps)
                nobs, rewards, done, _ = self.env.step(actions)
                self.buffer.add((obs, list(actions), list(rewards), nobs,
                                 1.0 if done else 0.0))
                ep_ret += float(np.mean(rewards))
                obs = nobs
                if len(self.buffer) >= min_fill:
                    losses.append(self.update())
            returns.append(ep_ret)
            self.episodes_done += 1
            if progress is not None and (ep + 1) % 100 == 0:
                progress(ep + 1, returns)
        return {
            "returns": returns,
            "moving_avg": moving_average(returns, 100),
            "loss": losses,
        }

    def to_dict(self):
        return {
            "version": DQN_VERSION,
            "kind": "dqn",
            "seed": self.seed,
            "hyperparameters": asdict(self.hp),
            "obs_dims": list(self.env.obs_dims),
            "train_steps": self.train_steps,
            "episodes_done": self.episodes_done,
            "nets": [n.to_dict() for n in self.nets],
            "nets_t": [n.to_dict() for n in self.nets_t],
            "opt": self.opt.state_dict(),
            "rng_state": self.rng.bit_generator.state,
            "buffer": self.buffer.to_dict(),
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def from_dict(cls, system: GridSystem, d):
        if d.get("version") != DQN_VERSION or d.get("kind") != "dqn":
            raise ValueError(
                f"unsupported DQN checkpoint "
                f"(version {d.get('version')}, kind {d.get('kind')})")
        hp = DqnHyperparameters(**d["hyperparameters"])
        tr = cls(system, hp, seed=d["seed"])
        if list(tr.env.obs_dims) != list(d["obs_dims"]):
            raise ValueError("checkpoint does not match this grid config")
        tr.nets = [DenseNet.from_dict(x) for x in d["nets"]]
        tr.nets_t = [DenseNet.from_dict(x) for x in d["nets_t"]]
        tr._init_optimizer()
        tr.opt.load_state_dict(d["opt"])
        tr.rng = np.random.default_rng()
        tr.rng.bit_generator.state = d["rng_state"]
        tr.buffer = ReplayBuffer.from_dict(d["buffer"])
        tr.train_steps = d["train_steps"]
        tr.episodes_done = d["episodes_done"]
        return tr

    @classmethod
    def load(cls, system: GridSystem, path):
        with open(path) as f:
            return cls.from_dict(system, json.load(f))


class DqnController:
    """Greedy evaluation wrapper around a trained DQN."""

    def __init__(self, trainer: DqnTrainer):
        self.trainer = trainer

    def reset(self, system):
        if system.n_area != self.trainer.n_agent:
            raise ValueError("policy was trained for a different grid")

    def act(self, obs, info):
        return self.trainer.act(obs, epsilon=0.0)
