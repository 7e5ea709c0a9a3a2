"""Cooperative multi-agent discrete soft actor-critic.

One agent per area. Each agent has a stochastic discrete actor over
{hold, shed} and a centralized critic that scores its own state-action
embedding together with an attention-weighted summary of the other
agents' embeddings. All agents share a single attention block. The
no-attention ablation runs the identical code path with the attention
contribution forced to zero.

Discrete actions make the soft policy update exact: instead of a
sampled-gradient estimator, the actor minimizes the closed-form
expectation sum_a pi(a|s) * (alpha*log pi(a|s) - Q(s, a)).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .env import ShedEnv
from .grid import GridSystem
from .nn import Adam, DenseNet, ShapeError, lrelu, lrelu_grad, softmax
from .scenarios import ScenarioStream

TRAINER_VERSION = 1


@dataclass
class Hyperparameters:
    hidden: int = 128
    embed_dim: int = 64
    attn_dim: int = 32
    lr_actor: float = 1e-4
    lr_critic: float = 1e-4
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = 0.05        # entropy temperature (on scaled rewards)
    reward_scale: float = 0.01
    buffer_size: int = 8000
    batch_size: int = 256
    warmup: int = 256          # stored transitions before updates begin
    scenario_pool: int = 256   # training scenarios cycled per episode
    use_attention: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ValueError("need buffer_size >= batch_size >= 1")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma must lie in [0, 1]")


class ReplayBuffer:
    """Uniform ring-buffer replay over multi-agent transitions."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data = []
        self._next = 0

    def __len__(self):
        return len(self._data)

    def add(self, transition):
        if len(self._data) < self.capacity:
            self._data.append(transition)
        else:
            self._data[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample(self, rng, batch_size: int):
        if batch_size > len(self._data):
            raise ValueError("not enough transitions to sample a batch")
        idx = rng.choice(len(self._data), size=batch_size, replace=False)
        return [self._data[i] for i in idx]

    def to_dict(self):
        return {
            "capacity": self.capacity,
            "next": self._next,
            "data": [
                [[o.tolist() for o in obs], act, rew,
                 [o.tolist() for o in nxt], done]
                for obs, act, rew, nxt, done in self._data
            ],
        }

    @classmethod
    def from_dict(cls, d):
        buf = cls(d["capacity"])
        for obs, act, rew, nxt, done in d["data"]:
            buf._data.append(([np.array(o) for o in obs], act, rew,
                              [np.array(o) for o in nxt], done))
        buf._next = d["next"]
        return buf


def _stack_batch(transitions, n_agent):
    """Column-stack a list of transitions into per-agent batch arrays."""
    obs = [np.stack([t[0][j] for t in transitions]) for j in range(n_agent)]
    act = np.array([t[1] for t in transitions], dtype=np.int64)
    rew = np.array([t[2] for t in transitions], dtype=np.float64)
    nxt = [np.stack([t[3][j] for t in transitions]) for j in range(n_agent)]
    done = np.array([t[4] for t in transitions], dtype=np.float64)
    return obs, act, rew, nxt, done


def one_hot(actions, n: int = 2):
    a = np.asarray(actions, dtype=np.int64)
    out = np.zeros(a.shape + (n,))
    np.put_along_axis(out, a[..., None], 1.0, axis=-1)
    return out


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class AttentionBlock:
    """Shared scaled-dot-product attention over agent embeddings.

    For focus agent j the summary is e_j = sum_{i != j} w_i * lrelu(Wv g_i)
    with w_i proportional to exp((Wq g_j) . (Wk g_i) / sqrt(d_attn)).
    """

    def __init__(self, wq, wk, wv):
        self.wq = np.asarray(wq, dtype=np.float64)
        self.wk = np.asarray(wk, dtype=np.float64)
        self.wv = np.asarray(wv, dtype=np.float64)
        if self.wq.shape != self.wk.shape or self.wv.shape[0] != self.wv.shape[1]:
            raise ShapeError("inconsistent attention weight shapes")
        if self.wq.shape[1] != self.wv.shape[1]:
            raise ShapeError("attention weights disagree on embedding dim")
        self.scale = 1.0 / np.sqrt(self.wq.shape[0])

    @classmethod
    def create(cls, embed_dim, attn_dim, rng):
        bound = 1.0 / np.sqrt(embed_dim)
        wq = rng.uniform(-bound, bound, size=(attn_dim, embed_dim))
        wk = rng.uniform(-bound, bound, size=(attn_dim, embed_dim))
        wv = rng.uniform(-bound, bound, size=(embed_dim, embed_dim))
        return cls(wq, wk, wv)

    def param_arrays(self):
        return [self.wq, self.wk, self.wv]

    def copy(self):
        return AttentionBlock(self.wq.copy(), self.wk.copy(), self.wv.copy())

    def forward(self, embeds):
        """Summaries for every focus agent. embeds: list of (B, d) arrays."""
        n = len(embeds)
        q = [g @ self.wq.T for g in embeds]
        k = [g @ self.wk.T for g in embeds]
        pre = [g @ self.wv.T for g in embeds]
        v = [lrelu(p) for p in pre]
        es, ws = [], []
        for j in range(n):
            others = [i for i in range(n) if i != j]
            if not others:
                es.append(np.zeros_like(embeds[j]))
                ws.append(None)
                continue
            scores = np.stack([(q[j] * k[i]).sum(axis=1) for i in others],
                              axis=1) * self.scale
            w = softmax(scores, axis=1)  # (B, n-1)
            e = sum(w[:, c, None] * v[i] for c, i in enumerate(others))
            es.append(e)
            ws.append(w)
        return es, {"q": q, "k": k, "pre": pre, "v": v, "w": ws,
                    "embeds": embeds}

    def backward(self, cache, de_list):
        """Gradients of sum_j <de_j, e_j> w.r.t. embeddings and weights."""
        q, k, pre, v, ws = (cache["q"], cache["k"], cache["pre"], cache["v"],
                            cache["w"])
        embeds = cache["embeds"]
        n = len(embeds)
        dg = [np.zeros_like(g) for g in embeds]
        dq = [np.zeros_like(x) for x in q]
        dk = [np.zeros_like(x) for x in k]
        dpre = [np.zeros_like(p) for p in pre]
        for j in range(n):
            de = de_list[j]
            others = [i for i in range(n) if i != j]
            if not others or de is None:
                continue
            w = ws[j]
            dw = np.stack([(de * v[i]).sum(axis=1) for i in others], axis=1)
            ds = w * (dw - (w * dw).sum(axis=1, keepdims=True)) * self.scale
            for c, i in enumerate(others):
                dpre[i] += w[:, c, None] * de * lrelu_grad(pre[i])
                dq[j] += ds[:, c, None] * k[i]
                dk[i] += ds[:, c, None] * q[j]
        dwq = np.zeros_like(self.wq)
        dwk = np.zeros_like(self.wk)
        dwv = np.zeros_like(self.wv)
        for i in range(n):
            dwq += dq[i].T @ embeds[i]
            dwk += dk[i].T @ embeds[i]
            dwv += dpre[i].T @ embeds[i]
            dg[i] += dq[i] @ self.wq + dk[i] @ self.wk + dpre[i] @ self.wv
        return dg, [dwq, dwk, dwv]

    def summary_for(self, focus_embed, other_embeds):
        """Attention summary for one focus embedding (no cache, no grads)."""
        if not other_embeds:
            return np.zeros_like(focus_embed)
        qf = focus_embed @ self.wq.T
        scores = np.stack([(qf * (g @ self.wk.T)).sum(axis=1)
                           for g in other_embeds], axis=1) * self.scale
        w = softmax(scores, axis=1)
        return sum(w[:, c, None] * lrelu(g @ self.wv.T)
                   for c, g in enumerate(other_embeds))

    def to_dict(self):
        return {"wq": self.wq.tolist(), "wk": self.wk.tolist(),
                "wv": self.wv.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["wq"]), np.array(d["wk"]), np.array(d["wv"]))


class SacTrainer:
    """Multi-agent discrete SAC with attention-embedded centralized critics."""

    def __init__(self, system: GridSystem, hp: Hyperparameters = None,
                 seed: int = 0):
        self.system = system
        self.hp = hp or Hyperparameters()
        self.seed = int(seed)
        self.env = ShedEnv(system)
        self.n_agent = self.env.n_area
        self.obs_dims = self.env.obs_dims
        self.n_actions = self.env.n_actions
        self.rng = np.random.default_rng([self.seed, 7])
        self._build_networks(np.random.default_rng([self.seed, 11]))
        self.buffer = ReplayBuffer(self.hp.buffer_size)
        self.train_steps = 0
        self.episodes_done = 0

    # -- construction -----------------------------------------------------

    def _build_networks(self, rng):
        hp = self.hp
        h = hp.hidden
        self.actors, self.embeds, self.critics = [], [], []
        for d in self.obs_dims:
            self.actors.append(DenseNet.create([d, h, h, self.n_actions], rng))
            self.embeds.append(DenseNet.create([d + self.n_actions, h,
                                                hp.embed_dim], rng))
            self.critics.append(DenseNet.create([2 * hp.embed_dim, h, h, 1],
                                                rng))
        self.attn = AttentionBlock.create(hp.embed_dim, hp.attn_dim, rng)
        self.actors_t = [a.copy() for a in self.actors]
        self.embeds_t = [g.copy() for g in self.embeds]
        self.critics_t = [f.copy() for f in self.critics]
        self.attn_t = self.attn.copy()
        self._init_optimizers()

    def _init_optimizers(self):
        critic_params = []
        for g, f in zip(self.embeds, self.critics):
            critic_params += g.param_arrays() + f.param_arrays()
        critic_params += self.attn.param_arrays()
        self.opt_critic = Adam(critic_params, self.hp.lr_critic)
        actor_params = []
        for a in self.actors:
            actor_params += a.param_arrays()
        self.opt_actor = Adam(actor_params, self.hp.lr_actor)

    def _target_pairs(self):
        pairs = []
        for o, t in zip(self.actors + self.embeds + self.critics,
                        self.actors_t + self.embeds_t + self.critics_t):
            pairs += list(zip(o.param_arrays(), t.param_arrays()))
        pairs += list(zip(self.attn.param_arrays(),
                          self.attn_t.param_arrays()))
        return pairs

    # -- acting -----------------------------------------------------------

    def policy_probs(self, obs):
        return [softmax(a.forward(o)) for a, o in zip(self.actors, obs)]

    def act(self, obs, greedy: bool = False):
        probs = self.policy_probs(obs)
        if greedy:
            return [int(np.argmax(p)) for p in probs]
        return [int(self.rng.choice(self.n_actions, p=p)) for p in probs]

    # -- critic side ------------------------------------------------------

    def _attention_summaries(self, block, embeds):
        if self.hp.use_attention:
            return block.forward(embeds)
        return [np.zeros_like(g) for g in embeds], None

    def _q_all(self, obs, act_onehot):
        """Online Q values plus caches for backprop. act_onehot: (B,n,2)."""
        g_out, g_cache = [], []
        for j, (g, o) in enumerate(zip(self.embeds, obs)):
            out, cache = g.forward_cached(
                np.concatenate([o, act_onehot[:, j]], axis=1))
            g_out.append(out)
            g_cache.append(cache)
        es, a_cache = self._attention_summaries(self.attn, g_out)
        qs, f_cache = [], []
        for j, f in enumerate(self.critics):
            out, cache = f.forward_cached(
                np.concatenate([g_out[j], es[j]], axis=1))
            qs.append(out[:, 0])
            f_cache.append(cache)
        return qs, (g_out, g_cache, a_cache, f_cache)

    def _target_q_focus(self, j, focus_embed, other_embeds):
        e = (self.attn_t.summary_for(focus_embed, other_embeds)
             if self.hp.use_attention else np.zeros_like(focus_embed))
        out = self.critics_t[j].forward(
            np.concatenate([focus_embed, e], axis=1))
        return out[:, 0]

    def _soft_targets(self, nxt, rew, done):
        """Per-agent soft Bellman targets on the scaled reward signal."""
        hp = self.hp
        n = self.n_agent
        logp = [log_softmax(a.forward(o)) for a, o in zip(self.actors_t, nxt)]
        probs = [np.exp(lp) for lp in logp]
        batch = nxt[0].shape[0]
        sampled = np.stack(
            [(self.rng.random(batch) < p[:, 1]).astype(np.int64)
             for p in probs], axis=1)
        hot = one_hot(sampled, self.n_actions)
        g_sampled = [g.forward(np.concatenate([o, hot[:, i]], axis=1))
                     for i, (g, o) in enumerate(zip(self.embeds_t, nxt))]
        ys = []
        for j in range(n):
            others = [g_sampled[i] for i in range(n) if i != j]
            soft_v = np.zeros(batch)
            for a in range(self.n_actions):
                hot_a = np.zeros((batch, self.n_actions))
                hot_a[:, a] = 1.0
                gj = self.embeds_t[j].forward(
                    np.concatenate([nxt[j], hot_a], axis=1))
                qa = self._target_q_focus(j, gj, others)
                soft_v += probs[j][:, a] * (qa - hp.alpha * logp[j][:, a])
            ys.append(hp.reward_scale * rew[:, j]
                      + hp.gamma * (1.0 - done) * soft_v)
        return ys

    def critic_update(self, batch):
        obs, act, rew, nxt, done = batch
        hp = self.hp
        n = self.n_agent
        batch_n = done.shape[0]
        ys = self._soft_targets(nxt, rew, done)
        hot = one_hot(act, self.n_actions)
        qs, (g_out, g_cache, a_cache, f_cache) = self._q_all(obs, hot)

        dg_total = [np.zeros_like(g) for g in g_out]
        de_list = [None] * n
        f_tapes = []
        loss = 0.0
        for j in range(n):
            err = qs[j] - ys[j]
            loss += float(np.mean(err ** 2))
            dq = (2.0 * err / batch_n)[:, None]
            tape = self.critics[j].backward_cached(f_cache[j], dq)
            f_tapes.append(tape)
            dg_total[j] += tape.input_grad[:, :hp.embed_dim]
            de_list[j] = tape.input_grad[:, hp.embed_dim:]
        if hp.use_attention:
            dg_attn, dw_attn = self.attn.backward(a_cache, de_list)
            for j in range(n):
                dg_total[j] += dg_attn[j]
        else:
            dw_attn = [np.zeros_like(w) for w in self.attn.param_arrays()]
        grads = []
        for j in range(n):
            g_tape = self.embeds[j].backward_cached(g_cache[j], dg_total[j])
            grads += g_tape.arrays() + f_tapes[j].arrays()
        grads += dw_attn
        self.opt_critic.step(grads)
        return loss

    # -- actor side -------------------------------------------------------

    def actor_update(self, batch):
        obs, act, _, _, _ = batch
        hp = self.hp
        n = self.n_agent
        batch_n = act.shape[0]
        hot = one_hot(act, self.n_actions)
        g_replay = [g.forward(np.concatenate([o, hot[:, j]], axis=1))
                    for j, (g, o) in enumerate(zip(self.embeds, obs))]
        grads = []
        loss = 0.0
        for j in range(n):
            others = [g_replay[i] for i in range(n) if i != j]
            q_a = np.empty((batch_n, self.n_actions))
            for a in range(self.n_actions):
                hot_a = np.zeros((batch_n, self.n_actions))
                hot_a[:, a] = 1.0
                gj = self.embeds[j].forward(
                    np.concatenate([obs[j], hot_a], axis=1))
                e = (self.attn.summary_for(gj, others)
                     if hp.use_attention else np.zeros_like(gj))
                q_a[:, a] = self.critics[j].forward(
                    np.concatenate([gj, e], axis=1))[:, 0]
            logits, cache = self.actors[j].forward_cached(obs[j])
            logp = log_softmax(logits)
            probs = np.exp(logp)
            c = hp.alpha * logp - q_a
            loss += float(np.mean((probs * c).sum(axis=1)))
            # d/dz of sum_a pi_a * c_a through the softmax (exact expectation)
            dz = probs * (c - (probs * c).sum(axis=1, keepdims=True)) / batch_n
            tape = self.actors[j].backward_cached(cache, dz)
            grads += tape.arrays()
        self.opt_actor.step(grads)
        return loss

    def soft_update(self):
        tau = self.hp.tau
        for online, target in self._target_pairs():
            target *= 1.0 - tau
            target += tau * online

    def update(self):
        batch = _stack_batch(self.buffer.sample(self.rng, self.hp.batch_size),
                             self.n_agent)
        c_loss = self.critic_update(batch)
        a_loss = self.actor_update(batch)
        self.soft_update()
        self.train_steps += 1
        return c_loss, a_loss

    # -- training loop ----------------------------------------------------

    def train(self, episodes: int, stream: ScenarioStream = None,
              progress=None):
        """Run training episodes; returns the per-episode reward history."""
        if episodes < 0:
            raise ValueError("episodes must be >= 0")
        if stream is None:
            stream = ScenarioStream.from_system(self.system, self.seed)
        hp = self.hp
        returns, critic_losses, actor_losses = [], [], []
        min_fill = max(hp.warmup, hp.batch_size)
        for ep in range(episodes):
            sc = stream.scenario(self.episodes_done % hp.scenario_pool)
            obs = self.env.reset(sc)
            done = False
            ep_ret = 0.0
            while not done:
                actions = self.act(obs)
                nobs, rewards, done, _ = self.env.step(actions)
                self.buffer.add((obs, list(actions), list(rewards), nobs,
                                 1.0 if done else 0.0))
                ep_ret += float(np.mean(rewards))
                obs = nobs
                if len(self.buffer) >= min_fill:
                    c_loss, a_loss = self.update()
                    critic_losses.append(c_loss)
                    actor_losses.append(a_loss)
            returns.append(ep_ret)
            self.episodes_done += 1
            if progress is not None and (ep + 1) % 100 == 0:
                progress(ep + 1, returns)
        return {
            "returns": returns,
            "moving_avg": moving_average(returns, 100),
            "critic_loss": critic_losses,
            "actor_loss": actor_losses,
        }

    # -- persistence ------------------------------------------------------

    def to_dict(self):
        return {
            "version": TRAINER_VERSION,
            "kind": "sac",
            "seed": self.seed,
            "hyperparameters": asdict(self.hp),
            "obs_dims": list(self.obs_dims),
            "train_steps": self.train_steps,
            "episodes_done": self.episodes_done,
            "actors": [n.to_dict() for n in self.actors],
            "embeds": [n.to_dict() for n in self.embeds],
            "critics": [n.to_dict() for n in self.critics],
            "attention": self.attn.to_dict(),
            "actors_t": [n.to_dict() for n in self.actors_t],
            "embeds_t": [n.to_dict() for n in self.embeds_t],
            "critics_t": [n.to_dict() for n in self.critics_t],
            "attention_t": self.attn_t.to_dict(),
            "opt_critic": self.opt_critic.state_dict(),
            "opt_actor": self.opt_actor.state_dict(),
            "rng_state": self.rng.bit_generator.state,
            "buffer": self.buffer.to_dict(),
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def from_dict(cls, system: GridSystem, d):
        if d.get("version") != TRAINER_VERSION or d.get("kind") != "sac":
            raise ValueError(
                f"unsupported trainer checkpoint "
                f"(version {d.get('version')}, kind {d.get('kind')})")
        hp = Hyperparameters(**d["hyperparameters"])
        tr = cls(system, hp, seed=d["seed"])
        if list(tr.obs_dims) != list(d["obs_dims"]):
            raise ValueError("checkpoint does not match this grid config")
        tr.actors = [DenseNet.from_dict(x) for x in d["actors"]]
        tr.embeds = [DenseNet.from_dict(x) for x in d["embeds"]]
        tr.critics = [DenseNet.from_dict(x) for x in d["critics"]]
        tr.attn = AttentionBlock.from_dict(d["attention"])
        tr.actors_t = [DenseNet.from_dict(x) for x in d["actors_t"]]
        tr.embeds_t = [DenseNet.from_dict(x) for x in d["embeds_t"]]
        tr.critics_t = [DenseNet.from_dict(x) for x in d["critics_t"]]
        tr.attn_t = AttentionBlock.from_dict(d["attention_t"])
        tr._init_optimizers()
        tr.opt_critic.load_state_dict(d["opt_critic"])
        tr.opt_actor.load_state_dict(d["opt_actor"])
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


class GreedyController:
    """Deterministic (argmax) evaluation wrapper around a trained policy."""

    def __init__(self, trainer: SacTrainer):
        self.trainer = trainer

    def reset(self, system):
        if system is not self.trainer.system:
            if system.n_area != self.trainer.n_agent:
                raise ValueError("policy was trained for a different grid")

    def act(self, obs, info):
        return self.trainer.act(obs, greedy=True)


def moving_average(values, window: int):
    """Trailing moving average; shorter prefixes average what exists."""
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out
