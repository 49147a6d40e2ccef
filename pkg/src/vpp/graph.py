"""Agent interaction graphs: grids, k-nearest-neighbour and random graphs."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph over agents ``0..n_agents-1``.

    ``edges`` holds each unordered pair once as ``(i, j)`` with ``i < j``,
    sorted lexicographically.
    """

    n_agents: int
    edges: tuple[tuple[int, int], ...]
    neighbor_lists: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be positive")
        canon = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop at {i}")
            if not (0 <= i < self.n_agents and 0 <= j < self.n_agents):
                raise ValueError(f"edge ({i}, {j}) out of range")
            canon.add((min(i, j), max(i, j)))
        edges = tuple(sorted(canon))
        nbrs = [[] for _ in range(self.n_agents)]
        for i, j in edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "neighbor_lists", tuple(tuple(sorted(v)) for v in nbrs))

    @classmethod
    def from_edges(cls, n_agents: int, edges) -> Graph:
        return cls(n_agents, tuple((int(i), int(j)) for i, j in edges))

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.neighbor_lists[i]

    def degree(self, i: int) -> int:
        return len(self.neighbor_lists[i])

    def directed_edges(self) -> list[tuple[int, int]]:
        return sorted([(i, j) for i, j in self.edges] + [(j, i) for i, j in self.edges])

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n_agents, self.n_agents), dtype=bool)
        for i, j in self.edges:
            A[i, j] = A[j, i] = True
        return A

    @classmethod
    def from_adjacency(cls, A) -> Graph:
        A = np.asarray(A, dtype=bool)
        i, j = np.nonzero(np.triu(A | A.T, k=1))
        return cls.from_edges(A.shape[0], zip(i.tolist(), j.tolist()))

    def relabel(self, perm) -> Graph:
        """Vertex ``v`` becomes ``perm[v]``."""
        perm = [int(p) for p in perm]
        return Graph.from_edges(self.n_agents, [(perm[i], perm[j]) for i, j in self.edges])

    def distances(self, source: int) -> np.ndarray:
        """Hop distance from ``source``; unreachable vertices get ``inf``."""
        dist = np.full(self.n_agents, np.inf)
        dist[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in self.neighbor_lists[u]:
                if dist[v] == np.inf:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def diameter(self) -> int:
        best = 0
        for s in range(self.n_agents):
            d = self.distances(s)
            finite = d[np.isfinite(d)]
            best = max(best, int(finite.max()))
        return best

    def is_tree(self) -> bool:
        return (len(self.edges) == self.n_agents - 1
                and bool(np.all(np.isfinite(self.distances(0)))))

    def to_json(self) -> str:
        return json.dumps({"n": self.n_agents, "edges": [list(e) for e in self.edges]})

    @classmethod
    def from_json(cls, text: str) -> Graph:
        obj = json.loads(text)
        return cls.from_edges(obj["n"], obj["edges"])


def build_grid(rows: int, cols: int) -> Graph:
    """4-connected lattice with vertex id ``row * cols + col``."""
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive, got {rows}x{cols}")
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.append((v, v + 1))
            if r + 1 < rows:
                edges.append((v, v + cols))
    return Graph.from_edges(rows * cols, edges)


def build_complete(n_agents: int) -> Graph:
    return Graph.from_edges(n_agents, [(i, j) for i in range(n_agents) for j in range(i + 1, n_agents)])


def _symmetrize(n: int, choices) -> Graph:
    return Graph.from_edges(n, [(i, j) for i, js in enumerate(choices) for j in js])


def knn_choices(positions, k: int, period: float | None = None) -> list[list[int]]:
    """Directed k-NN selection; ties broken by lower vertex id.

    With ``period`` set, distances are measured on a square torus of that side.
    """
    pts = np.asarray(positions, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if not np.all(np.isfinite(pts)):
        raise ValueError("positions must be finite")
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < n_agents ({n}), got {k}")
    diff = pts[:, None, :] - pts[None, :, :]
    if period is not None:
        diff = diff - period * np.round(diff / period)
    d2 = (diff ** 2).sum(-1)
    ids = np.arange(n)
    out = []
    for i in range(n):
        order = np.lexsort((ids, d2[i]))
        out.append([int(j) for j in order if j != i][:k])
    return out


def build_knn(positions, k: int, period: float | None = None) -> Graph:
    """k-NN graph symmetrized by union."""
    choices = knn_choices(positions, k, period)
    return _symmetrize(len(choices), choices)


def build_random(n_agents: int, degree: int, seed: int) -> Graph:
    """Each vertex picks ``degree`` distinct partners uniformly; union-symmetrized."""
    if degree < 1 or degree >= n_agents:
        raise ValueError(f"degree must satisfy 1 <= degree < n_agents ({n_agents}), got {degree}")
    rng = np.random.default_rng(seed)
    choices = []
    for i in range(n_agents):
        others = np.array([j for j in range(n_agents) if j != i])
        choices.append(rng.choice(others, size=degree, replace=False).tolist())
    return _symmetrize(n_agents, choices)


def refresh_schedule(current_step: int, interval: int) -> bool:
    if interval < 1:
        raise ValueError("interval must be >= 1")
    return current_step % interval == 0


def build_random_tree(n_agents: int, rng: np.random.Generator) -> Graph:
    """Uniform-attachment tree with randomly permuted labels."""
    if n_agents < 1:
        raise ValueError("n_agents must be positive")
    perm = rng.permutation(n_agents)
    edges = [(perm[v], perm[int(rng.integers(v))]) for v in range(1, n_agents)]
    return Graph.from_edges(n_agents, edges)


def build_random_graph(n_agents: int, edge_prob: float, rng: np.random.Generator) -> Graph:
    """Erdos-Renyi graph: each pair is an edge independently with ``edge_prob``."""
    edges = [(i, j) for i in range(n_agents) for j in range(i + 1, n_agents)
             if rng.random() < edge_prob]
    return Graph.from_edges(n_agents, edges)
