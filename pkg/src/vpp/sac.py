"""Per-agent soft actor-critic: replay buffer, critics, the three losses and the training loop."""
from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tape, Tensor
from .config import sub_seed
from .envs import EnvironmentFault, NetworkedEnv
from .nn import add_dense, make_optimizer
from .policy import ActionDistribution, VPPPolicy, log_prob

EXACT_MAX_ACTIONS = 8


class DataIntegrityError(ValueError):
    """A stored transition lacks data a loss needs (for example a neighbour action)."""


class TrainingAborted(RuntimeError):
    """Training stopped on an environment fault after flushing a checkpoint."""

    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# experience


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray          # (N, obs_dim)
    actions: np.ndarray      # (N,) integer or (N, act_dim) real
    rewards: np.ndarray      # (N,)
    next_obs: np.ndarray
    adj: np.ndarray          # (N, N) graph in effect when the actions were taken
    next_adj: np.ndarray
    step: int

    def __post_init__(self):
        n = self.obs.shape[0]
        if self.rewards.shape != (n,) or self.actions.shape[0] != n or self.next_obs.shape[0] != n:
            raise ValueError("transition arrays disagree on the agent count")
        if self.adj.shape != (n, n) or self.next_adj.shape != (n, n):
            raise ValueError("adjacency must be (N, N)")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    adj: np.ndarray
    next_adj: np.ndarray
    steps: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]

    @classmethod
    def stack(cls, transitions) -> Batch:
        ts = list(transitions)
        if not ts:
            raise ValueError("empty batch")
        return cls(*(np.stack([getattr(t, f) for t in ts]) for f in
                     ("obs", "actions", "rewards", "next_obs", "adj", "next_adj", "step")))


class ReplayBuffer:
    """Bounded FIFO with a seeded uniform sampler; storage grows on demand."""

    _FIELDS = ("obs", "actions", "rewards", "next_obs", "adj", "next_adj", "steps")

    def __init__(self, capacity: int = 1_000_000, seed: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._rng = np.random.default_rng(seed)
        self._data: dict[str, np.ndarray] | None = None
        self._size = 0
        self._head = 0        # next write slot once the buffer has wrapped

    def __len__(self) -> int:
        return self._size

    def _allocate(self, tr: Transition, n: int) -> None:
        vals = self._row(tr)
        self._data = {k: np.empty((n,) + np.shape(v), dtype=np.asarray(v).dtype)
                      for k, v in vals.items()}

    @staticmethod
    def _row(tr: Transition) -> dict:
        return {"obs": tr.obs, "actions": tr.actions, "rewards": tr.rewards,
                "next_obs": tr.next_obs, "adj": tr.adj, "next_adj": tr.next_adj,
                "steps": tr.step}

    def push(self, tr: Transition) -> None:
        if self._data is None:
            self._allocate(tr, min(self.capacity, 1024))
        elif tr.obs.shape != self._data["obs"].shape[1:]:
            raise ValueError("agent count or observation shape changed between transitions")
        alloc = self._data["obs"].shape[0]
        if self._size == alloc and alloc < self.capacity:
            grow = min(self.capacity, 2 * alloc)
            for k, arr in self._data.items():
                new = np.empty((grow,) + arr.shape[1:], dtype=arr.dtype)
                new[:alloc] = arr
                self._data[k] = new
            alloc = grow
        if self._size < alloc:
            slot = self._size
            self._size += 1
        else:
            slot = self._head
            self._head = (self._head + 1) % alloc
        for k, v in self._row(tr).items():
            self._data[k][slot] = v

    def _order(self) -> np.ndarray:
        if self._size < self.capacity:
            return np.arange(self._size)
        return (self._head + np.arange(self._size)) % self._size

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        d = self._data
        return [Transition(d["obs"][i], d["actions"][i], d["rewards"][i], d["next_obs"][i],
                           d["adj"][i], d["next_adj"][i], int(d["steps"][i]))
                for i in self._order()]

    def sample(self, batch_size: int) -> Batch:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = self._rng.integers(0, self._size, size=batch_size)
        return Batch(*(self._data[k][idx] for k in self._FIELDS))


# ---------------------------------------------------------------------------
# critics


def _stacked_mlp(x, layers, n_agents: int) -> Tensor:
    """Per-agent MLP on ``x`` of shape (B, N, ..., in); returns (B, N, ...)."""
    x = ad.as_tensor(x)
    perm = (1, 0) + tuple(range(2, x.ndim))
    xt = ad.transpose(x, perm)
    lead = xt.shape[:-1]
    h = ad.reshape(xt, (n_agents, -1, xt.shape[-1]))
    for k, (W, b) in enumerate(layers):
        h = ad.matmul(h, W) + b
        if k < len(layers) - 1:
            h = ad.relu(h)
    out = ad.reshape(h, lead)
    return ad.transpose(out, perm[: out.ndim])


class CriticSet:
    """Soft V and Q networks for every agent, plus Polyak-averaged target V.

    Networks for all agents are stored stacked along a leading agent axis.  The
    critic state is ``[o_i, mean_{j in N_i} o_j]`` over raw observations, so it is
    identical for every number of policy rounds and never moves while the policy
    trains.  Q additionally sees the one-hot own action and the summed one-hot
    neighbour actions.
    """

    LAYERS = ("l1", "l2", "out")

    def __init__(self, n_agents: int, state_dim: int, n_actions: int, rng: np.random.Generator,
                 hidden: int = 64, gamma: float = 0.95, tau: float = 0.01, alpha: float = 0.2,
                 action_kind: str = "discrete"):
        if not 0.0 <= gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if action_kind not in ("discrete", "gaussian"):
            raise ValueError(f"unknown action kind {action_kind!r}")
        self.n_agents, self.n_actions = n_agents, n_actions
        self.gamma, self.tau, self.alpha = gamma, tau, alpha
        self.action_kind = action_kind
        feat = 2 * state_dim
        act = 2 * n_actions
        self.value = ParameterStore()
        self.qvalue = ParameterStore()
        for store, prefix, fan_in in ((self.value, "value", feat), (self.qvalue, "qvalue", feat + act)):
            add_dense(store, rng, f"{prefix}.l1", fan_in, hidden, stack=n_agents)
            add_dense(store, rng, f"{prefix}.l2", hidden, hidden, stack=n_agents)
            add_dense(store, rng, f"{prefix}.out", hidden, 1, stack=n_agents)
        self.value_target = {k: p.data.copy() for k, p in self.value.items()}

    # -- inputs ---------------------------------------------------------------

    @staticmethod
    def features(policy: VPPPolicy, obs, adj) -> np.ndarray:
        s = np.asarray(obs, dtype=np.float64)
        if s.ndim == 2:
            s = s[None]
        A = np.asarray(adj, dtype=np.float64)
        if A.ndim == 2:
            A = np.broadcast_to(A, (s.shape[0],) + A.shape)
        deg = np.maximum(A.sum(-1, keepdims=True), 1.0)
        return np.concatenate([s, (A @ s) / deg], axis=-1)

    def encode_actions(self, actions, adj) -> np.ndarray:
        """[one-hot a_i, sum_{j in N_i} one-hot a_j] per agent, shape (B, N, 2A)."""
        a = np.asarray(actions)
        B, N = a.shape[0], self.n_agents
        if a.shape != (B, N):
            raise DataIntegrityError(f"expected actions for {N} agents, got shape {a.shape}")
        if not np.issubdtype(a.dtype, np.integer) or np.any(a < 0) or np.any(a >= self.n_actions):
            raise DataIntegrityError("missing or invalid action in batch")
        onehot = np.eye(self.n_actions)[a]
        nbr = np.asarray(adj, dtype=np.float64) @ onehot
        return np.concatenate([onehot, nbr], axis=-1)

    def encode_own_alternatives(self, actions, adj) -> np.ndarray:
        """Action codes with agent i's own action swept over all values: (B, N, A, 2A)."""
        enc = self.encode_actions(actions, adj)
        B, N, A = enc.shape[0], self.n_agents, self.n_actions
        own = np.broadcast_to(np.eye(A), (B, N, A, A))
        nbr = np.broadcast_to(enc[:, :, None, A:], (B, N, A, A))
        return np.concatenate([own, nbr], axis=-1)

    @staticmethod
    def encode_continuous(actions: Tensor, adj) -> Tensor:
        a = ad.as_tensor(actions)
        return ad.concat([a, ad.matmul(np.asarray(adj, dtype=np.float64), a)], axis=-1)

    # -- networks -------------------------------------------------------------

    def _layers(self, source, prefix: str, detach: bool):
        out = []
        for name in self.LAYERS:
            W, b = source[f"{prefix}.{name}.W"], source[f"{prefix}.{name}.b"]
            if detach or isinstance(W, np.ndarray):
                W = Tensor(W.data if isinstance(W, Tensor) else W)
                b = Tensor(b.data if isinstance(b, Tensor) else b)
            out.append((W, b))
        return out

    def v(self, feats, detach: bool = False) -> Tensor:
        return _stacked_mlp(feats, self._layers(self.value, "value", detach), self.n_agents)

    def v_target(self, feats) -> np.ndarray:
        with ad.no_grad():
            return _stacked_mlp(feats, self._layers(self.value_target, "value", True),
                                self.n_agents).data

    def q(self, feats, action_code, detach: bool = False) -> Tensor:
        code = ad.as_tensor(action_code)
        f = np.asarray(feats)
        extra = code.ndim - f.ndim
        if extra:
            f = np.broadcast_to(f.reshape(f.shape[:2] + (1,) * extra + f.shape[2:]),
                                code.shape[:-1] + f.shape[-1:])
        x = ad.concat([Tensor(f), code], axis=-1)
        return _stacked_mlp(x, self._layers(self.qvalue, "qvalue", detach), self.n_agents)

    def stores(self) -> dict[str, ParameterStore]:
        return {"value": self.value, "qvalue": self.qvalue}


# ---------------------------------------------------------------------------
# losses


def q_target(rewards, next_v, gamma: float) -> np.ndarray:
    """r + gamma * V_target(s'); plain arrays, so nothing reaches a tape."""
    return np.asarray(rewards, dtype=np.float64) + gamma * np.asarray(next_v, dtype=np.float64)


def _cached(cache, key, fn):
    if cache is None:
        return fn()
    if key not in cache:
        cache[key] = fn()
    return cache[key]


def _policy_dist(batch, policy, cache) -> ActionDistribution:
    return _cached(cache, "dist", lambda: policy(batch.obs, batch.adj))


def _sampled_actions(batch, policy, rng, cache) -> np.ndarray:
    def draw():
        return _policy_dist(batch, policy, cache).sample(rng)
    return _cached(cache, "sampled", draw)


def loss_q(batch: Batch, critics: CriticSet, policy: VPPPolicy, cache: dict | None = None) -> Tensor:
    if len(batch) == 0:
        raise ValueError("empty batch")
    feats = _cached(cache, "feats", lambda: critics.features(policy, batch.obs, batch.adj))
    nxt = _cached(cache, "next_feats",
                  lambda: critics.features(policy, batch.next_obs, batch.next_adj))
    target = q_target(batch.rewards, critics.v_target(nxt), critics.gamma)
    if critics.action_kind == "discrete":
        code = critics.encode_actions(batch.actions, batch.adj)
    else:
        if not np.all(np.isfinite(batch.actions)):
            raise DataIntegrityError("missing or invalid action in batch")
        code = critics.encode_continuous(Tensor(batch.actions), batch.adj).data
    diff = critics.q(feats, code) - target
    return ad.mean(diff * diff) * 0.5


def loss_v(batch: Batch, critics: CriticSet, policy: VPPPolicy, rng: np.random.Generator,
           cache: dict | None = None) -> Tensor:
    """Regress V_i(s) onto a single joint-action sample of Q_i - alpha log q_i."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    feats = _cached(cache, "feats", lambda: critics.features(policy, batch.obs, batch.adj))
    with ad.no_grad():
        dist = _policy_dist(batch, policy, cache)
        a = _sampled_actions(batch, policy, rng, cache)
        logq, _ = log_prob(dist, a)
        if critics.action_kind == "discrete":
            code = critics.encode_actions(a, batch.adj)
        else:
            code = critics.encode_continuous(Tensor(a), batch.adj).data
        qv = critics.q(feats, code, detach=True).data
    target = qv - critics.alpha * logq.data
    diff = critics.v(feats) - target
    return ad.mean(diff * diff) * 0.5


def loss_pi(batch: Batch, critics: CriticSet, policy: VPPPolicy, rng: np.random.Generator,
            mode: str = "auto", cache: dict | None = None) -> Tensor:
    """E sum_i [alpha log q_i(a_i|s) - Q_i(s, a_i, a_{N_i})], averaged over the batch.

    Discrete heads use an exact sum over agent i's own actions (``mode="exact"``,
    the default when there are at most 8 actions) with neighbour actions drawn
    from the current policy, or a single-sample likelihood-ratio estimator
    (``mode="sampled"``).  Gaussian heads use the reparameterised path.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if mode not in ("auto", "exact", "sampled"):
        raise ValueError(f"unknown mode {mode!r}")
    feats = _cached(cache, "feats", lambda: critics.features(policy, batch.obs, batch.adj))
    dist = _policy_dist(batch, policy, cache)
    alpha = critics.alpha
    B = len(batch)
    if dist.kind == "gaussian":
        a = dist.rsample(rng)
        logq, _ = log_prob(dist, a)
        code = critics.encode_continuous(a, batch.adj)
        qv = critics.q(feats, code, detach=True)
        return ad.sum(logq * alpha - qv) * (1.0 / B)
    if mode == "auto":
        mode = "exact" if critics.n_actions <= EXACT_MAX_ACTIONS else "sampled"
    a = _sampled_actions(batch, policy, rng, cache)
    with ad.no_grad():
        if mode == "exact":
            q_all = critics.q(feats, critics.encode_own_alternatives(a, batch.adj), detach=True).data
        else:
            q_s = critics.q(feats, critics.encode_actions(a, batch.adj), detach=True).data
    if mode == "exact":
        per = dist.probs * (dist.log_probs * alpha - q_all)
        return ad.sum(per) * (1.0 / B)
    logq, _ = log_prob(dist, a)
    weight = alpha * logq.data - q_s
    surrogate = ad.sum(logq * weight) * (1.0 / B)
    # value of the objective, gradient of the score-function estimator
    return surrogate - surrogate.data + float(weight.sum() / B)


def soft_update_targets(critics: CriticSet, tau: float | None = None) -> None:
    tau = critics.tau if tau is None else tau
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    for name, p in critics.value.items():
        critics.value_target[name] = tau * p.data + (1.0 - tau) * critics.value_target[name]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainSettings:
    total_steps: int
    batch_size: int = 1024
    buffer_capacity: int = 1_000_000
    warmup_steps: int = 1024
    lr: float = 0.01
    optimizer: str = "adam"
    gradient_steps: int = 1
    env_steps_per_iteration: int = 1
    pi_mode: str = "auto"
    checkpoint_every: int = 100
    target_reward: float | None = None
    target_window: int = 20

    @classmethod
    def from_config(cls, cfg: dict) -> TrainSettings:
        keys = ("total_steps", "batch_size", "buffer_capacity", "warmup_steps", "lr", "optimizer",
                "gradient_steps", "env_steps_per_iteration", "pi_mode", "checkpoint_every",
                "target_reward")
        return cls(**{k: cfg[f"train.{k}"] for k in keys})


METRIC_COLUMNS = ("step", "episode", "mean_group_reward", "loss_pi", "loss_q", "loss_v",
                  "kl_diag", "wallclock_s")


@dataclass
class _EpisodeStats:
    reward: float = 0.0
    steps: int = 0
    losses: dict = field(default_factory=lambda: {"loss_pi": [], "loss_q": [], "loss_v": []})


class Trainer:
    """Runs the rollout / update loop; ``run()`` yields one metrics dict per episode."""

    def __init__(self, env: NetworkedEnv, policy: VPPPolicy, critics: CriticSet,
                 settings: TrainSettings, seed: int = 0, checkpoint_dir: str | Path | None = None):
        self.env, self.policy, self.critics, self.settings = env, policy, critics, settings
        self.seed = seed
        self.sampler = np.random.default_rng(sub_seed(seed, "sampler"))
        self.buffer = ReplayBuffer(settings.buffer_capacity, seed=sub_seed(seed, "buffer"))
        kind, lr = settings.optimizer, settings.lr
        self.opt_pi = make_optimizer(kind, list(policy.store), lr)
        self.opt_v = make_optimizer(kind, list(critics.value), lr)
        self.opt_q = make_optimizer(kind, list(critics.qvalue), lr)
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        self.global_step = 0
        self.episode = 0
        self.updates = 0

    def update(self, batch: Batch) -> tuple[float, float, float]:
        """One gradient step on V, Q, the policy, then the target soft-update."""
        cache: dict = {}
        pi_tape, v_tape, q_tape = Tape(), Tape(), Tape()
        with pi_tape:
            cache["dist"] = self.policy(batch.obs, batch.adj)
        with v_tape:
            lv = loss_v(batch, self.critics, self.policy, self.sampler, cache)
            self.critics.value.zero_grad()
            ad.backward(lv)
        self.opt_v.step()
        with q_tape:
            lq = loss_q(batch, self.critics, self.policy, cache)
            self.critics.qvalue.zero_grad()
            ad.backward(lq)
        self.opt_q.step()
        with pi_tape:
            lpi = loss_pi(batch, self.critics, self.policy, self.sampler, self.settings.pi_mode, cache)
            self.policy.store.zero_grad()
            ad.backward(lpi)
        self.opt_pi.step()
        for tape in (pi_tape, v_tape, q_tape):
            tape.release()
        soft_update_targets(self.critics)
        self.updates += 1
        return lpi.item(), lq.item(), lv.item()

    def checkpoint(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ad.save_checkpoint(self.policy.store.snapshot(), directory / "policy")
        ad.save_checkpoint(self.critics.value.snapshot(), directory / "value")
        ad.save_checkpoint(self.critics.qvalue.snapshot(), directory / "qvalue")
        ad.save_checkpoint(dict(self.critics.value_target), directory / "value_target")
        return directory

    def _act(self, obs, adj) -> np.ndarray:
        a = self.policy.act(obs, adj, self.sampler)[0]
        if self.policy.config.head_type == "gaussian":
            return a
        return a.astype(np.int64)

    def run(self):
        s = self.settings
        start = time.perf_counter()
        window: deque = deque(maxlen=s.target_window)
        obs = self.env.reset()
        stats = _EpisodeStats()
        while self.global_step < s.total_steps:
            for _ in range(s.env_steps_per_iteration):
                if self.global_step >= s.total_steps:
                    break
                adj = self.env.graph().adjacency()
                action = self._act(obs, adj)
                try:
                    next_obs, rewards, done = self.env.step(action)
                except EnvironmentFault as err:
                    where = None
                    if self.checkpoint_dir is not None:
                        where = self.checkpoint(self.checkpoint_dir / "fault")
                    raise TrainingAborted(f"environment fault at step {self.global_step}: {err}",
                                          where) from err
                self.buffer.push(Transition(obs, action, rewards, next_obs, adj,
                                            self.env.graph().adjacency(), self.global_step))
                self.global_step += 1
                stats.reward += float(rewards.sum())
                stats.steps += 1
                obs = next_obs
                if done:
                    row = self._episode_row(stats, start)
                    window.append(row["mean_group_reward"])
                    yield row
                    stats = _EpisodeStats()
                    obs = self.env.reset()
                    if (s.target_reward is not None and len(window) == window.maxlen
                            and float(np.mean(window)) >= s.target_reward):
                        return
            if len(self.buffer) >= max(s.warmup_steps, 1):
                for _ in range(s.gradient_steps):
                    lpi, lq, lv = self.update(self.buffer.sample(s.batch_size))
                    stats.losses["loss_pi"].append(lpi)
                    stats.losses["loss_q"].append(lq)
                    stats.losses["loss_v"].append(lv)

    def _episode_row(self, stats: _EpisodeStats, start: float) -> dict:
        self.episode += 1
        row = {"step": self.global_step, "episode": self.episode,
               "mean_group_reward": stats.reward / max(stats.steps, 1)}
        for k, vals in stats.losses.items():
            row[k] = float(np.mean(vals)) if vals else math.nan
        row["kl_diag"] = math.nan
        row["wallclock_s"] = time.perf_counter() - start
        if self.checkpoint_dir is not None and self.episode % self.settings.checkpoint_every == 0:
            self.checkpoint(self.checkpoint_dir / f"episode_{self.episode:06d}")
        return row


def evaluate(env: NetworkedEnv, policy: VPPPolicy, episodes: int, rng: np.random.Generator,
             greedy: bool = False) -> np.ndarray:
    """Mean per-step group reward of each evaluation episode."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    out = np.empty(episodes)
    for e in range(episodes):
        obs = env.reset()
        total, steps, done = 0.0, 0, False
        while not done:
            adj = env.graph().adjacency()
            with ad.no_grad():
                dist = policy(obs, adj)
            if greedy:
                a = (np.argmax(dist.probs.data, axis=-1) if dist.kind == "discrete"
                     else dist.mean.data)[0]
            else:
                a = dist.sample(rng)[0]
            obs, r, done = env.step(a)
            total += float(r.sum())
            steps += 1
        out[e] = total / steps
    return out
