"""Variational policy network: unrolled neural message passing over the agent graph.

Shapes follow the convention (B, N, ...) for batch and agent axes.  The
adjacency may be a single (N, N) matrix or one per batch element.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

MASK_BIAS = -1e30
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0


@dataclass
class PolicyConfig:
    obs_dim: int
    n_actions: int
    n_agents: int
    variant: str = "mean_field"          # "mean_field" | "loopy_bp"
    rounds: int = 2
    embed_dim: int = 32
    heads: int = 2
    hidden: int = 128
    head_type: str = "discrete"           # "discrete" | "gaussian"
    partial_observation: bool = True
    shared_weights: bool = True

    def __post_init__(self):
        if self.variant not in ("mean_field", "loopy_bp"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.head_type not in ("discrete", "gaussian"):
            raise ValueError(f"unknown head type {self.head_type!r}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads >= 1")


@dataclass
class ActionDistribution:
    kind: str
    probs: Tensor | None = None
    log_probs: Tensor | None = None
    mean: Tensor | None = None
    log_std: Tensor | None = None
    extras: dict = field(default_factory=dict)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Draw actions without tracking gradients."""
        if self.kind == "discrete":
            p = self.probs.data
            cdf = np.cumsum(p, axis=-1)
            u = rng.random(p.shape[:-1] + (1,)) * cdf[..., -1:]
            return np.minimum((u >= cdf).sum(axis=-1), p.shape[-1] - 1)
        eps = rng.standard_normal(self.mean.shape)
        return self.mean.data + np.exp(self.log_std.data) * eps

    def rsample(self, rng: np.random.Generator) -> Tensor:
        """Reparameterized Gaussian sample: mean + exp(log_std) * eps."""
        if self.kind != "gaussian":
            raise ValueError("rsample needs a gaussian head")
        eps = rng.standard_normal(self.mean.shape)
        return self.mean + ad.exp(self.log_std) * eps

    def entropy(self) -> np.ndarray:
        if self.kind == "discrete":
            return -(self.probs.data * self.log_probs.data).sum(-1)
        d = self.mean.shape[-1]
        return self.log_std.data.sum(-1) + 0.5 * d * (1.0 + math.log(2 * math.pi))


def log_prob(dist: ActionDistribution, actions) -> tuple[Tensor, Tensor]:
    """Per-agent log densities (B, N) and their sum over agents (B,)."""
    if dist.kind == "discrete":
        a = np.asarray(actions)
        A = dist.log_probs.shape[-1]
        if a.shape != dist.log_probs.shape[:-1]:
            raise ValueError(f"action shape {a.shape} != {dist.log_probs.shape[:-1]}")
        if np.any(a < 0) or np.any(a >= A) or not np.issubdtype(a.dtype, np.integer):
            raise ValueError("categorical action index out of range")
        onehot = np.eye(A)[a]
        per_agent = ad.sum(dist.log_probs * onehot, axis=-1)
    else:
        a = ad.as_tensor(actions)
        z = (a - dist.mean) * ad.exp(-dist.log_std)
        d = dist.mean.shape[-1]
        per_agent = (ad.sum(z * z, axis=-1) * -0.5 - ad.sum(dist.log_std, axis=-1)
                     - 0.5 * d * math.log(2 * math.pi))
    return per_agent, ad.sum(per_agent, axis=-1)


def _as_batch_adj(adj, batch: int, n: int) -> np.ndarray:
    A = np.asarray(adj, dtype=bool)
    if A.ndim == 2:
        A = np.broadcast_to(A, (batch, n, n))
    if A.shape != (batch, n, n):
        raise ValueError(f"adjacency shape {A.shape} != {(batch, n, n)}")
    return A


class VPPPolicy:
    """Neural mean-field / loopy-BP policy with shared or per-agent weights."""

    def __init__(self, config: PolicyConfig, rng: np.random.Generator):
        self.config = config
        self.store = ParameterStore()
        self._build(rng)

    # -- parameters -----------------------------------------------------------

    def _dense_param(self, rng, name, fan_in, fan_out, bias=True):
        c = self.config
        if c.shared_weights:
            self.store.add(f"{name}.W", ad.glorot_uniform(rng, fan_in, fan_out))
            if bias:
                self.store.add(f"{name}.b", np.zeros(fan_out))
        else:
            n = c.n_agents
            self.store.add(f"{name}.W", ad.glorot_uniform(rng, fan_in, fan_out, (n, fan_in, fan_out)))
            if bias:
                self.store.add(f"{name}.b", np.zeros((n, 1, fan_out)))

    def _build(self, rng):
        c = self.config
        d, h = c.embed_dim, c.hidden
        self._dense_param(rng, "encoder", c.obs_dim, d)
        state_dim = c.obs_dim
        for m in range(1, c.rounds + 1):
            if c.partial_observation:
                self._dense_param(rng, f"state{m}.self", state_dim, d)
                self._dense_param(rng, f"state{m}.nbr", state_dim, d, bias=False)
            s_in = state_dim
            if c.variant == "mean_field":
                for proj in ("query", "key", "value"):
                    self._dense_param(rng, f"round{m}.{proj}", d, d, bias=False)
                self._dense_param(rng, f"round{m}.state", s_in, d)
            else:
                for proj in ("query", "key", "value"):
                    self._dense_param(rng, f"round{m}.{proj}", d, d, bias=False)
                self._dense_param(rng, f"round{m}.state_src", s_in, d)
                self._dense_param(rng, f"round{m}.state_dst", s_in, d, bias=False)
            self._dense_param(rng, f"round{m}.mlp1", d, h)
            self._dense_param(rng, f"round{m}.mlp2", h, d)
            if c.partial_observation:
                state_dim = d
        if c.variant == "loopy_bp":
            self._dense_param(rng, "edge_init.src", d, d)
            self._dense_param(rng, "edge_init.dst", d, d, bias=False)
            self._dense_param(rng, "node_out.state", state_dim, d)
            self._dense_param(rng, "node_out.msg", d, d, bias=False)
        self._dense_param(rng, "head.hidden", d, h)
        if c.head_type == "discrete":
            self._dense_param(rng, "head.logits", h, c.n_actions)
        else:
            self._dense_param(rng, "head.mean", h, c.n_actions)
            self._dense_param(rng, "head.log_std", h, c.n_actions)

    def _dense(self, x: Tensor, name: str, act=None, params=None) -> Tensor:
        """Apply layer ``name`` to ``x`` of shape (B, N, ..., in)."""
        P = self.store if params is None else params
        W = P[f"{name}.W"]
        b = P[f"{name}.b"] if f"{name}.b" in P else None
        if self.config.shared_weights:
            y = ad.matmul(x, W)
            if b is not None:
                y = y + b
        else:
            # move the agent axis first so each agent multiplies its own weights
            nd = x.ndim
            perm = (1, 0) + tuple(range(2, nd))
            xt = ad.transpose(x, perm)
            shp = xt.shape
            flat = ad.reshape(xt, (shp[0], -1, shp[-1]))
            y = ad.matmul(flat, W)
            if b is not None:
                y = y + b
            y = ad.transpose(ad.reshape(y, shp[:-1] + (W.shape[-1],)), perm)
        return act(y) if act is not None else y

    # -- message passing ------------------------------------------------------

    def init_embeddings(self, obs: Tensor) -> Tensor:
        return self._dense(obs, "encoder", ad.relu)

    def state_message_pass(self, states: Tensor, adjf: np.ndarray, m: int) -> Tensor:
        """s^m = relu(W1 s_i + W2 sum_{j in N_i} s_j)."""
        agg = ad.matmul(adjf, states)
        return ad.relu(self._dense(states, f"state{m}.self") + self._dense(agg, f"state{m}.nbr"))

    def mean_field_round(self, mu: Tensor, states: Tensor, A: np.ndarray, m: int,
                         extras: dict | None = None) -> Tensor:
        c = self.config
        B, N, d = mu.shape
        H, dh = c.heads, d // c.heads

        def heads(t):
            return ad.transpose(ad.reshape(t, (B, N, H, dh)), (0, 2, 1, 3))   # (B, H, N, dh)

        q = heads(self._dense(mu, f"round{m}.query"))
        k = heads(self._dense(mu, f"round{m}.key"))
        v = heads(self._dense(mu, f"round{m}.value"))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))                  # (B, H, N, N)
        bias = np.where(A, 0.0, MASK_BIAS)[:, None]
        att = ad.softmax(scores + bias, axis=-1) * A[:, None].astype(np.float64)
        agg = ad.matmul(att, v)                                               # (B, H, N, dh)
        agg = ad.reshape(ad.transpose(agg, (0, 2, 1, 3)), (B, N, d))
        if extras is not None:
            extras.setdefault("attention", []).append(att.data)
        pre = self._dense(states, f"round{m}.state") + agg
        h = ad.relu(pre)
        h = self._dense(h, f"round{m}.mlp1", ad.relu)
        # linear output: a trailing ReLU here lets whole embeddings die during training
        return self._dense(h, f"round{m}.mlp2")

    def edge_init(self, mu0: Tensor, A: np.ndarray) -> Tensor:
        """nu^0_ij = relu(W [mu_i, mu_j] + b) for each directed edge; slot [b, i, j]."""
        B, N, d = mu0.shape
        src = ad.reshape(self._dense(mu0, "edge_init.src"), (B, N, 1, d))
        dst = ad.reshape(self._dense(mu0, "edge_init.dst"), (B, 1, N, d))
        return ad.relu(src + dst) * A[..., None].astype(np.float64)

    def _edge_dense(self, x: Tensor, name: str, act=None) -> Tensor:
        # (B, N, N, in); per-agent weights are indexed by the sender (axis 1)
        return self._dense(x, name, act)

    def lbp_round(self, nu: Tensor, states: Tensor, A: np.ndarray, m: int,
                  extras: dict | None = None) -> Tensor:
        """nu_ij <- relu(W_s [s_i, s_j] + sum_{k in N_i \\ j} a_ik W_V nu_ki), then MLP."""
        c = self.config
        B, N, _, d = nu.shape
        H, dh = c.heads, d // c.heads

        def heads(t):   # (B, N, N, d) -> (B, H, N, N, dh)
            return ad.transpose(ad.reshape(t, (B, N, N, H, dh)), (0, 3, 1, 2, 4))

        nu_in = ad.transpose(nu, (0, 2, 1, 3))          # slot [b, i, k] = nu_{k -> i}
        q = heads(self._edge_dense(nu, f"round{m}.query"))          # [b,h,i,j]
        k = heads(self._edge_dense(nu_in, f"round{m}.key"))         # [b,h,i,k]
        v = heads(self._edge_dense(nu_in, f"round{m}.value"))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 2, 4, 3)))     # [b,h,i,j,k]
        eye = np.eye(N, dtype=bool)
        valid = A[:, :, :, None] & np.transpose(A, (0, 2, 1))[:, :, None, :] & ~eye[None, None]
        bias = np.where(valid, 0.0, MASK_BIAS)[:, None]
        att = ad.softmax(scores + bias, axis=-1) * valid[:, None].astype(np.float64)
        agg = ad.matmul(att, v)                                       # [b,h,i,j,dh]
        agg = ad.reshape(ad.transpose(agg, (0, 2, 3, 1, 4)), (B, N, N, d))
        if extras is not None:
            extras.setdefault("edge_attention", []).append(att.data)
        src = ad.reshape(self._dense(states, f"round{m}.state_src"), (B, N, 1, d))
        dst = ad.reshape(self._dense(states, f"round{m}.state_dst"), (B, 1, N, d))
        h = ad.relu(src + dst + agg)
        h = self._edge_dense(h, f"round{m}.mlp1", ad.relu)
        h = self._edge_dense(h, f"round{m}.mlp2")
        return h * A[..., None].astype(np.float64)

    def lbp_finalize(self, nu: Tensor, states: Tensor) -> Tensor:
        incoming = ad.sum(nu, axis=1)                   # [b, i] = sum_k nu_{k -> i}
        return ad.relu(self._dense(states, "node_out.state") + self._dense(incoming, "node_out.msg"))

    def output_head(self, mu: Tensor) -> ActionDistribution:
        h = self._dense(mu, "head.hidden", ad.relu)
        if self.config.head_type == "discrete":
            logits = self._dense(h, "head.logits")
            return ActionDistribution("discrete", probs=ad.softmax(logits, axis=-1),
                                      log_probs=ad.log_softmax(logits, axis=-1))
        mean = self._dense(h, "head.mean")
        log_std = ad.clip(self._dense(h, "head.log_std"), LOG_STD_MIN, LOG_STD_MAX)
        return ActionDistribution("gaussian", mean=mean, log_std=log_std)

    # -- full forward ---------------------------------------------------------

    def forward(self, obs, adj, keep_extras: bool = False) -> ActionDistribution:
        c = self.config
        x = np.asarray(obs, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        B, N, od = x.shape
        if od != c.obs_dim:
            raise ValueError(f"observation dim {od} != configured {c.obs_dim}")
        if not c.shared_weights and N != c.n_agents:
            raise ValueError(f"per-agent weights need {c.n_agents} agents, got {N}")
        A = _as_batch_adj(adj, B, N)
        adjf = A.astype(np.float64)
        extras = {} if keep_extras else None

        s = Tensor(x)
        mu = self.init_embeddings(s)
        if extras is not None:
            extras["embeddings"] = [mu.data]
        states = [s]
        for m in range(1, c.rounds + 1):
            if c.partial_observation:
                states.append(self.state_message_pass(states[-1], adjf, m))
            else:
                states.append(s)
        if c.variant == "mean_field":
            for m in range(1, c.rounds + 1):
                mu = self.mean_field_round(mu, states[m - 1], A, m, extras)
                if extras is not None:
                    extras["embeddings"].append(mu.data)
        else:
            nu = self.edge_init(mu, A)
            for m in range(1, c.rounds + 1):
                nu = self.lbp_round(nu, states[m - 1], A, m, extras)
            mu = self.lbp_finalize(nu, states[-1])
            if extras is not None:
                extras["edge_embeddings"] = nu.data
                extras["embeddings"].append(mu.data)
        dist = self.output_head(mu)
        if extras is not None:
            extras["states"] = [t.data for t in states]
            dist.extras = extras
        return dist

    __call__ = forward

    def final_states(self, obs, adj) -> np.ndarray:
        """s^M for every agent without recording gradients (raw observations when M = 0)."""
        c = self.config
        x = np.asarray(obs, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if not c.partial_observation or c.rounds == 0:
            return x
        adjf = _as_batch_adj(adj, x.shape[0], x.shape[1]).astype(np.float64)
        with ad.no_grad():
            s = Tensor(x)
            for m in range(1, c.rounds + 1):
                s = self.state_message_pass(s, adjf, m)
        return s.data

    @property
    def state_dim(self) -> int:
        c = self.config
        return c.embed_dim if c.partial_observation and c.rounds > 0 else c.obs_dim

    def act(self, obs, adj, rng: np.random.Generator) -> np.ndarray:
        with ad.no_grad():
            dist = self.forward(obs, adj)
        return dist.sample(rng)
