"""Pairwise Markov random fields over discrete joint actions, solved by enumeration.

These routines are exact and exponential in the number of agents; they serve
as ground truth for the variational solvers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .graph import Graph

DEFAULT_CAP = 2 ** 24


class CapacityError(RuntimeError):
    """Joint state space is larger than the enumeration cap."""


@dataclass(frozen=True)
class PairwiseMRF:
    graph: Graph
    n_actions: int
    node_potentials: np.ndarray            # (n_agents, n_actions)
    edge_potentials: dict                   # (i, j), i < j -> (n_actions, n_actions) table [a_i, a_j]

    def __post_init__(self):
        node = np.asarray(self.node_potentials, dtype=np.float64)
        if node.shape != (self.graph.n_agents, self.n_actions):
            raise ValueError(f"node_potentials shape {node.shape} != "
                             f"{(self.graph.n_agents, self.n_actions)}")
        if not np.all(np.isfinite(node)):
            raise ValueError("node potentials must be finite")
        edges = {}
        for key, table in self.edge_potentials.items():
            i, j = key
            t = np.asarray(table, dtype=np.float64)
            if i > j:
                i, j, t = j, i, t.T
            if t.shape != (self.n_actions, self.n_actions) or not np.all(np.isfinite(t)):
                raise ValueError(f"bad edge potential for {key}")
            edges[(i, j)] = t
        if set(edges) != set(self.graph.edges):
            raise ValueError("edge_potentials keys must match graph.edges")
        object.__setattr__(self, "node_potentials", node)
        object.__setattr__(self, "edge_potentials", edges)

    @property
    def n_agents(self) -> int:
        return self.graph.n_agents

    def pair(self, i: int, j: int) -> np.ndarray:
        """Edge table oriented as ``[a_i, a_j]``."""
        return self.edge_potentials[(i, j)] if i < j else self.edge_potentials[(j, i)].T

    def log_potential(self, actions) -> float:
        a = [int(x) for x in actions]
        total = float(sum(self.node_potentials[i, a[i]] for i in range(self.n_agents)))
        for (i, j), t in self.edge_potentials.items():
            total += t[a[i], a[j]]
        return total

    def to_json(self) -> str:
        return json.dumps({
            "graph": json.loads(self.graph.to_json()),
            "n_actions": self.n_actions,
            "node_potentials": self.node_potentials.tolist(),
            "edge_potentials": {f"{i}-{j}": t.tolist() for (i, j), t in self.edge_potentials.items()},
        })

    @classmethod
    def from_json(cls, text: str) -> PairwiseMRF:
        obj = json.loads(text)
        g = Graph.from_edges(obj["graph"]["n"], obj["graph"]["edges"])
        edges = {tuple(int(x) for x in k.split("-")): np.array(v)
                 for k, v in obj["edge_potentials"].items()}
        return cls(g, obj["n_actions"], np.array(obj["node_potentials"]), edges)


def random_mrf(graph: Graph, n_actions: int, rng: np.random.Generator, scale: float = 1.0,
               edge_scale: float | None = None) -> PairwiseMRF:
    """Potentials drawn from Uniform(-scale, scale)."""
    es = scale if edge_scale is None else edge_scale
    node = rng.uniform(-scale, scale, size=(graph.n_agents, n_actions))
    edges = {e: rng.uniform(-es, es, size=(n_actions, n_actions)) for e in graph.edges}
    return PairwiseMRF(graph, n_actions, node, edges)


def independent_mrf(node_potentials) -> PairwiseMRF:
    node = np.asarray(node_potentials, dtype=np.float64)
    return PairwiseMRF(Graph(node.shape[0], ()), node.shape[1], node, {})


@dataclass(frozen=True)
class JointTable:
    probabilities: np.ndarray   # shape (n_actions,) * n_agents
    log_partition: float

    @property
    def n_agents(self) -> int:
        return self.probabilities.ndim

    @property
    def n_actions(self) -> int:
        return self.probabilities.shape[0]

    def log_probabilities(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probabilities)


def log_potential_table(mrf: PairwiseMRF, cap: int = DEFAULT_CAP) -> np.ndarray:
    n, A = mrf.n_agents, mrf.n_actions
    if A ** n > cap:
        raise CapacityError(f"{A}^{n} joint states exceed enumeration cap {cap}")
    table = np.zeros((A,) * n)
    for i in range(n):
        shape = [1] * n
        shape[i] = A
        table = table + mrf.node_potentials[i].reshape(shape)
    for (i, j), t in mrf.edge_potentials.items():
        shape = [1] * n
        shape[i] = shape[j] = A
        table = table + t.reshape(shape)
    return table


def brute_force_joint(mrf: PairwiseMRF, cap: int = DEFAULT_CAP) -> JointTable:
    logp = log_potential_table(mrf, cap)
    log_z = float(logsumexp(logp))
    return JointTable(np.exp(logp - log_z), log_z)


def exact_marginals(joint: JointTable) -> np.ndarray:
    """Per-agent marginals, shape (n_agents, n_actions)."""
    P = joint.probabilities
    n = P.ndim
    return np.stack([P.sum(axis=tuple(k for k in range(n) if k != i)) for i in range(n)])


def product_table(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    table = np.ones(())
    for qi in q:
        table = np.multiply.outer(table, qi)
    return table


def kl_product_vs_joint(q, joint: JointTable) -> float:
    """KL(prod_i q_i || joint); returns ``math.inf`` when the product puts mass off-support."""
    prod = product_table(q)
    P = joint.probabilities
    support = prod > 0
    if np.any(support & (P <= 0)):
        return math.inf
    with np.errstate(divide="ignore"):
        logq = np.log(prod[support])
        logp = np.log(P[support])
    return float(np.sum(prod[support] * (logq - logp)))


def sample_joint(joint: JointTable, rng_seed, size: int | None = None):
    """Inverse-CDF sampling of joint actions.

    ``rng_seed`` may be an int seed or a ``numpy.random.Generator``.
    Returns a tuple of per-agent actions, or an (size, n_agents) array.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    flat = joint.probabilities.reshape(-1)
    cdf = np.cumsum(flat)
    cdf /= cdf[-1]
    u = rng.random(1 if size is None else size)
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), flat.size - 1)
    configs = np.stack(np.unravel_index(idx, joint.probabilities.shape), axis=-1)
    if size is None:
        return tuple(int(a) for a in configs[0])
    return configs


def softmax_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
