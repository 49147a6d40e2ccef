"""Exact soft (maximum-entropy) dynamic programming on enumerable networked MDPs."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .graph import Graph
from .mrf import DEFAULT_CAP, CapacityError, PairwiseMRF


@dataclass(frozen=True)
class TabularMDP:
    """Finite-horizon MDP over a global state with factored joint actions.

    ``transitions`` has shape (S, A, ..., A, S') with one action axis per agent;
    ``rewards`` has shape (N, S, A, ..., A).
    """

    graph: Graph
    n_actions: int
    transitions: np.ndarray
    rewards: np.ndarray
    horizon: int
    gamma: float = 1.0

    def __post_init__(self):
        n, A = self.graph.n_agents, self.n_actions
        S = self.transitions.shape[0]
        if self.transitions.shape != (S,) + (A,) * n + (S,):
            raise ValueError(f"transitions shape {self.transitions.shape} inconsistent")
        if self.rewards.shape != (n, S) + (A,) * n:
            raise ValueError(f"rewards shape {self.rewards.shape} inconsistent")
        if np.max(np.abs(self.transitions.sum(axis=-1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_agents(self) -> int:
        return self.graph.n_agents


def from_local_rewards(graph: Graph, n_actions: int, n_states: int, reward_fn, transitions=None,
                       horizon: int = 1, gamma: float = 1.0) -> TabularMDP:
    """Build an MDP whose reward ``reward_fn(i, s, a_i, a_nbrs)`` sees only local actions.

    ``a_nbrs`` is a tuple ordered like ``graph.neighbors(i)``.  ``transitions``
    defaults to a constant (single self-looping) state.
    """
    n, A = graph.n_agents, n_actions
    R = np.zeros((n, n_states) + (A,) * n)
    for s in range(n_states):
        for a in itertools.product(range(A), repeat=n):
            for i in range(n):
                R[(i, s) + a] = reward_fn(i, s, a[i], tuple(a[j] for j in graph.neighbors(i)))
    if transitions is None:
        transitions = np.zeros((n_states,) + (A,) * n + (n_states,))
        for s in range(n_states):
            transitions[(s,) + (slice(None),) * n + (s,)] = 1.0
    return TabularMDP(graph, A, np.asarray(transitions, dtype=np.float64), R, horizon, gamma)


@dataclass
class SoftSolution:
    Q: list       # per decision step t: (S, A, ..., A)
    V: list       # per decision step t: (S,)
    policy: list  # per decision step t: (S, A, ..., A)


def soft_backward(mdp: TabularMDP, cap: int = DEFAULT_CAP) -> SoftSolution:
    n, A, S = mdp.n_agents, mdp.n_actions, mdp.n_states
    if S * A ** n > cap:
        raise CapacityError(f"{S} * {A}^{n} exceeds enumeration cap {cap}")
    joint_axes = tuple(range(1, n + 1))
    total_r = mdp.rewards.sum(axis=0)
    Qs, Vs, pis = [None] * mdp.horizon, [None] * mdp.horizon, [None] * mdp.horizon
    v_next = None
    for t in reversed(range(mdp.horizon)):
        Q = total_r.copy()
        if v_next is not None:
            Q = Q + mdp.gamma * (mdp.transitions @ v_next)
        V = logsumexp(Q, axis=joint_axes)
        pi = np.exp(Q - V.reshape((S,) + (1,) * n))
        Qs[t], Vs[t], pis[t] = Q, V, pi
        v_next = V
    return SoftSolution(Qs, Vs, pis)


def terminal_mrf(mdp: TabularMDP, state: int = 0) -> PairwiseMRF:
    """MRF whose potentials are the pairwise/unary rewards at ``state``.

    Rewards must decompose into unary and pairwise terms over graph edges; the
    decomposition is recovered by Möbius inversion of the total reward.
    """
    total = mdp.rewards.sum(axis=0)[state]
    coeffs = mobius_coefficients(total)
    n, A = mdp.n_agents, mdp.n_actions
    node = np.zeros((n, A))
    edges = {e: np.zeros((A, A)) for e in mdp.graph.edges}
    for S_, phi in coeffs.items():
        if len(S_) == 0:
            continue
        if len(S_) == 1:
            node[S_[0]] += phi
        elif len(S_) == 2 and S_ in edges:
            edges[S_] += phi
        elif np.max(np.abs(phi)) > 1e-10:
            raise ValueError(f"reward has interaction on {S_} outside graph edges")
    return PairwiseMRF(mdp.graph, A, node, edges)


def mobius_coefficients(f: np.ndarray) -> dict:
    """Log-linear (corner) decomposition f(a) = sum_S phi_S(a_S) with phi_S = 0 when any a_k = 0.

    Returns a dict mapping sorted subsets (tuples) to arrays over the subset's axes.
    """
    n = f.ndim
    restricted = {}
    for r in range(n + 1):
        for U in itertools.combinations(range(n), r):
            idx = tuple(slice(None) if k in U else 0 for k in range(n))
            restricted[U] = f[idx]
    coeffs = {}
    for r in range(n + 1):
        for S_ in itertools.combinations(range(n), r):
            phi = np.zeros((f.shape[0],) * r)
            for q in range(r + 1):
                for U in itertools.combinations(S_, q):
                    shape = [f.shape[0] if k in U else 1 for k in S_]
                    sign = -1.0 if (r - q) % 2 else 1.0
                    phi = phi + sign * restricted[U].reshape(shape)
            coeffs[S_] = phi
    return coeffs


def interaction_order_check(policy_table, graph: Graph) -> float:
    """Largest log-linear interaction on an agent subset not inside any {i} ∪ N_i."""
    P = np.asarray(policy_table, dtype=np.float64)
    if np.any(P <= 0):
        raise ValueError("policy table must be strictly positive")
    coeffs = mobius_coefficients(np.log(P))
    cliques = [set((i,) + graph.neighbors(i)) for i in range(graph.n_agents)]
    worst = 0.0
    for S_, phi in coeffs.items():
        if len(S_) < 2 or any(set(S_) <= c for c in cliques):
            continue
        worst = max(worst, float(np.max(np.abs(phi))))
    return worst


def interaction_magnitudes(policy_table) -> dict:
    """Max |phi_S| for every subset size, useful for reporting higher-order terms."""
    coeffs = mobius_coefficients(np.log(np.asarray(policy_table, dtype=np.float64)))
    out = {}
    for S_, phi in coeffs.items():
        k = len(S_)
        out[k] = max(out.get(k, 0.0), float(np.max(np.abs(phi))) if phi.size else 0.0)
    return out
