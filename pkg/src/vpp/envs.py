"""Desk-scale networked-MDP environments with per-agent local rewards.

Every environment exposes the same small contract:

* ``reset(seed=None) -> obs`` with shape (n_agents, obs_dim)
* ``step(actions) -> (obs, rewards, done)`` with per-agent rewards
* ``graph() -> Graph`` for the topology currently in effect
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod

import numpy as np

from .graph import Graph, build_grid, build_knn, build_random, refresh_schedule


class EnvironmentFault(RuntimeError):
    """Raised when an environment reaches an unrecoverable internal state."""


class NetworkedEnv(ABC):
    n_agents: int
    obs_dim: int
    n_actions: int
    episode_length: int

    def __init__(self, seed: int | None = None):
        self._rng = np.random.default_rng(seed)
        self.t = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.t = 0
        self._reset()
        return self._observe()

    def step(self, actions) -> tuple[np.ndarray, np.ndarray, bool]:
        if self.t >= self.episode_length:
            raise RuntimeError("episode finished; call reset()")
        a = self._check_actions(actions)
        rewards = self._step(a)
        self.t += 1
        if not np.all(np.isfinite(rewards)):
            raise EnvironmentFault(f"non-finite reward at step {self.t}")
        return self._observe(), rewards, self.t >= self.episode_length

    def _check_actions(self, actions) -> np.ndarray:
        a = np.asarray(actions)
        if a.shape != (self.n_agents,):
            raise ValueError(f"expected {self.n_agents} actions, got shape {a.shape}")
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(np.equal(np.mod(a, 1), 0)):
                raise ValueError("actions must be integers")
            a = a.astype(np.int64)
        if np.any(a < 0) or np.any(a >= self.n_actions):
            raise ValueError(f"actions must lie in [0, {self.n_actions})")
        return a

    @abstractmethod
    def graph(self) -> Graph: ...

    @abstractmethod
    def _reset(self) -> None: ...

    @abstractmethod
    def _step(self, actions: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _observe(self) -> np.ndarray: ...


# ---------------------------------------------------------------------------


class ConsensusGrid(NetworkedEnv):
    """Binary coordination game on a lattice with a constant observation.

    Each edge contributes ``-(a_i - a_j)^2``, split evenly between its endpoints.
    """

    obs_dim = 1
    n_actions = 2

    def __init__(self, rows: int = 3, cols: int = 3, episode_length: int = 25,
                 seed: int | None = None):
        super().__init__(seed)
        self._graph = build_grid(rows, cols)
        self.n_agents = self._graph.n_agents
        self.episode_length = episode_length
        self._edges = np.array(self._graph.edges, dtype=np.int64).reshape(-1, 2)

    def graph(self) -> Graph:
        return self._graph

    def _reset(self) -> None:
        pass

    def _step(self, a: np.ndarray) -> np.ndarray:
        r = np.zeros(self.n_agents)
        if len(self._edges):
            i, j = self._edges[:, 0], self._edges[:, 1]
            pen = -0.5 * (a[i] - a[j]).astype(np.float64) ** 2
            np.add.at(r, i, pen)
            np.add.at(r, j, pen)
        return r

    def _observe(self) -> np.ndarray:
        return np.ones((self.n_agents, 1))


# ---------------------------------------------------------------------------

# approach index = side of the intersection a vehicle arrives from
NORTH, SOUTH, EAST, WEST = range(4)
_SIDES = {"N": NORTH, "S": SOUTH, "E": EAST, "W": WEST}
# phase 0 serves the north/south approaches, phase 1 east/west
_GREEN = {0: (NORTH, SOUTH), 1: (EAST, WEST)}


class TrafficGrid(NetworkedEnv):
    """Signalised intersections on a lattice with integer queues.

    A vehicle in the north approach travels south; when served it joins the
    north approach of the intersection below, or leaves the network at the
    boundary.  Arrivals enter only through boundary approaches.
    """

    obs_dim = 6
    n_actions = 2

    def __init__(self, rows: int = 4, cols: int = 4, arrival_rate: float | dict = 0.5,
                 episode_length: int = 100, service_rate: int = 3,
                 arrivals: str = "poisson", queue_scale: float = 10.0,
                 seed: int | None = None):
        super().__init__(seed)
        if arrivals not in ("poisson", "deterministic"):
            raise ValueError(f"unknown arrival process {arrivals!r}")
        if service_rate < 0:
            raise ValueError("service_rate must be >= 0")
        self.rows, self.cols = rows, cols
        self._graph = build_grid(rows, cols)
        self.n_agents = rows * cols
        self.episode_length = episode_length
        self.service_rate = int(service_rate)
        self.arrivals = arrivals
        self.queue_scale = queue_scale
        self._rates = self._rate_table(arrival_rate)
        self._downstream = self._routing()

    def _rate_table(self, arrival_rate) -> np.ndarray:
        per_side = np.zeros(4)
        if isinstance(arrival_rate, dict):
            for key, val in arrival_rate.items():
                if key not in _SIDES:
                    raise ValueError(f"unknown approach {key!r}; use N/S/E/W")
                per_side[_SIDES[key]] = float(val)
        else:
            per_side[:] = float(arrival_rate)
        if np.any(per_side < 0):
            raise ValueError("arrival rates must be nonnegative")
        rates = np.zeros((self.n_agents, 4))
        for v in range(self.n_agents):
            r, c = divmod(v, self.cols)
            if r == 0:
                rates[v, NORTH] = per_side[NORTH]
            if r == self.rows - 1:
                rates[v, SOUTH] = per_side[SOUTH]
            if c == self.cols - 1:
                rates[v, EAST] = per_side[EAST]
            if c == 0:
                rates[v, WEST] = per_side[WEST]
        return rates

    def _routing(self) -> np.ndarray:
        """Target intersection of each served approach, -1 for an exit."""
        out = np.full((self.n_agents, 4), -1, dtype=np.int64)
        for v in range(self.n_agents):
            r, c = divmod(v, self.cols)
            if r + 1 < self.rows:
                out[v, NORTH] = v + self.cols
            if r > 0:
                out[v, SOUTH] = v - self.cols
            if c > 0:
                out[v, EAST] = v - 1
            if c + 1 < self.cols:
                out[v, WEST] = v + 1
        return out

    def graph(self) -> Graph:
        return self._graph

    def _reset(self) -> None:
        self.queues = np.zeros((self.n_agents, 4), dtype=np.int64)
        self.phase = np.zeros(self.n_agents, dtype=np.int64)
        self.entered = 0
        self.exited = 0
        self._credit = np.zeros((self.n_agents, 4))

    def _arrivals(self) -> np.ndarray:
        if self.arrivals == "poisson":
            return self._rng.poisson(self._rates)
        self._credit += self._rates
        whole = np.floor(self._credit + 1e-12)
        self._credit -= whole
        return whole.astype(np.int64)

    def _step(self, a: np.ndarray) -> np.ndarray:
        self.phase = a.copy()
        new = self._arrivals()
        self.queues += new
        self.entered += int(new.sum())
        inflow = np.zeros_like(self.queues)
        for v in range(self.n_agents):
            for side in _GREEN[int(a[v])]:
                served = min(int(self.queues[v, side]), self.service_rate)
                if served == 0:
                    continue
                self.queues[v, side] -= served
                target = self._downstream[v, side]
                if target < 0:
                    self.exited += served
                else:
                    inflow[target, side] += served
        self.queues += inflow
        if self.entered != self.exited + int(self.queues.sum()):
            raise EnvironmentFault("vehicle conservation violated")
        return -self.queues.sum(axis=1).astype(np.float64)

    def _observe(self) -> np.ndarray:
        onehot = np.eye(2)[self.phase]
        return np.concatenate([self.queues / self.queue_scale, onehot], axis=1)


# ---------------------------------------------------------------------------

_MOVES = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0]])


def torus_delta(a: np.ndarray, b: np.ndarray, period: float) -> np.ndarray:
    """Shortest displacement from ``a`` to ``b`` on a square torus."""
    d = b - a
    return d - period * np.round(d / period)


class SpreadGrid(NetworkedEnv):
    """Cooperative landmark coverage on a torus with a dynamic k-NN graph.

    ``reward_mode="violation"`` adds a dominating all-pairs log-distance bonus,
    so rewards stop being local to the graph.  ``graph_type="random"`` swaps
    the k-NN rebuild for a fresh random graph of the same out-degree.
    """

    n_actions = 5

    def __init__(self, n_agents: int = 12, n_landmarks: int = 12, world_size: float = 6.0,
                 k_neighbors: int = 3, episode_length: int = 25, reward_mode: str = "local",
                 refresh_interval: int = 1, step_size: float = 0.5,
                 collision_radius: float = 0.3, collision_penalty: float = 1.0,
                 violation_weight: float = 5.0, graph_type: str = "knn",
                 seed: int | None = None):
        super().__init__(seed)
        if graph_type not in ("knn", "random"):
            raise ValueError(f"unknown graph_type {graph_type!r}")
        if reward_mode not in ("local", "violation"):
            raise ValueError(f"unknown reward_mode {reward_mode!r}")
        if n_landmarks < 1:
            raise ValueError("need at least one landmark")
        if not 1 <= k_neighbors < n_agents:
            raise ValueError(f"k_neighbors must lie in [1, {n_agents})")
        refresh_schedule(0, refresh_interval)       # validates the interval
        self.n_agents = n_agents
        self.n_landmarks = n_landmarks
        self.world_size = float(world_size)
        self.k_neighbors = k_neighbors
        self.episode_length = episode_length
        self.reward_mode = reward_mode
        self.refresh_interval = refresh_interval
        self.step_size = step_size
        self.collision_radius = collision_radius
        self.collision_penalty = collision_penalty
        self.violation_weight = violation_weight
        self.graph_type = graph_type
        self._n_seen = min(3, n_landmarks)
        self.obs_dim = 4 + 2 * self._n_seen

    def graph(self) -> Graph:
        return self._graph

    def _rebuild(self) -> None:
        if self.graph_type == "knn":
            self._graph = build_knn(self.positions, self.k_neighbors, period=self.world_size)
        else:
            seed = int(self._rng.integers(2 ** 63 - 1))
            self._graph = build_random(self.n_agents, self.k_neighbors, seed)

    def _reset(self) -> None:
        self.positions = self._rng.uniform(0, self.world_size, (self.n_agents, 2))
        self.landmarks = self._rng.uniform(0, self.world_size, (self.n_landmarks, 2))
        self._rebuild()

    def place(self, positions=None, landmarks=None) -> np.ndarray:
        """Overwrite agent/landmark positions (for tests and scripted scenarios)."""
        if positions is not None:
            self.positions = np.mod(np.asarray(positions, dtype=np.float64), self.world_size)
        if landmarks is not None:
            self.landmarks = np.mod(np.asarray(landmarks, dtype=np.float64), self.world_size)
        self._rebuild()
        return self._observe()

    def rewards_at(self, positions: np.ndarray, graph: Graph) -> np.ndarray:
        L = self.world_size
        to_land = torus_delta(positions[:, None], self.landmarks[None], L)
        r = -np.sqrt((to_land ** 2).sum(-1)).min(axis=1)
        pair = np.sqrt((torus_delta(positions[:, None], positions[None], L) ** 2).sum(-1))
        close = (pair < self.collision_radius) & graph.adjacency()
        r -= self.collision_penalty * close.sum(axis=1)
        if self.reward_mode == "violation":
            off = ~np.eye(self.n_agents, dtype=bool)
            logs = np.where(off, np.log(pair + 1e-3), 0.0)
            r += self.violation_weight * logs.sum(axis=1) / (self.n_agents - 1)
        return r

    def _step(self, a: np.ndarray) -> np.ndarray:
        # rewards use the graph in effect when the actions were chosen
        acting_graph = self._graph
        self.positions = np.mod(self.positions + self.step_size * _MOVES[a], self.world_size)
        r = self.rewards_at(self.positions, acting_graph)
        if refresh_schedule(self.t + 1, self.refresh_interval):
            self._rebuild()
        return r

    def _observe(self) -> np.ndarray:
        L = self.world_size
        ang = 2 * math.pi * self.positions / L
        feats = [np.sin(ang), np.cos(ang)]
        d = torus_delta(self.positions[:, None], self.landmarks[None], L)
        order = np.argsort((d ** 2).sum(-1), axis=1, kind="stable")[:, : self._n_seen]
        nearest = np.take_along_axis(d, order[..., None], axis=1)
        feats.append(nearest.reshape(self.n_agents, -1) / L)
        return np.concatenate(feats, axis=1)


# ---------------------------------------------------------------------------

ENVIRONMENTS = {
    "consensus_grid": ConsensusGrid,
    "traffic_grid": TrafficGrid,
    "spread_grid": SpreadGrid,
}


def make_env(name: str, **kwargs) -> NetworkedEnv:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**kwargs)
