"""Classical variational inference on pairwise MRFs.

Mean-field coordinate ascent (sequential sweeps) and loopy belief
propagation (synchronous, log-domain messages), with their free energies.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .mrf import CapacityError, PairwiseMRF, brute_force_joint, kl_product_vs_joint

LOG_FLOOR = 1e-300
TRACE_CAP = 2 ** 16


@dataclass
class VIReport:
    iterations_run: int = 0
    converged: bool = False
    final_residual: float = float("inf")
    objective_trace: list = field(default_factory=list)
    objective: str = "kl"

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def check_marginals(q, n_agents: int, n_actions: int, tol: float = 1e-12) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (n_agents, n_actions):
        raise ValueError(f"marginals shape {q.shape} != {(n_agents, n_actions)}")
    if np.any(q < 0) or np.any(np.abs(q.sum(axis=1) - 1.0) > tol):
        raise ValueError("marginals must be nonnegative rows summing to 1")
    return q


def uniform_marginals(mrf: PairwiseMRF) -> np.ndarray:
    return np.full((mrf.n_agents, mrf.n_actions), 1.0 / mrf.n_actions)


def _normalize_log(logv: np.ndarray) -> np.ndarray:
    return logv - logsumexp(logv, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# mean field


def mean_field_sweep(mrf: PairwiseMRF, q) -> np.ndarray:
    """One Gauss-Seidel pass in agent-id order; returns new marginals."""
    q = check_marginals(q, mrf.n_agents, mrf.n_actions, tol=1e-9).copy()
    for i in range(mrf.n_agents):
        logits = mrf.node_potentials[i].copy()
        for j in mrf.graph.neighbors(i):
            logits += mrf.pair(i, j) @ q[j]
        q[i] = np.exp(_normalize_log(logits))
    return q


def mean_field_free_energy(mrf: PairwiseMRF, q) -> float:
    """E_q[sum_i log q_i - log unnormalized pi], computed without enumeration."""
    q = np.asarray(q, dtype=np.float64)
    logq = np.log(np.maximum(q, LOG_FLOOR))
    energy = float(np.sum(q * logq) - np.sum(q * mrf.node_potentials))
    for (i, j), t in mrf.edge_potentials.items():
        energy -= float(q[i] @ t @ q[j])
    return energy


def _objective(mrf: PairwiseMRF, q, joint):
    if joint is not None:
        return kl_product_vs_joint(q, joint)
    return mean_field_free_energy(mrf, q)


def _trace_joint(mrf: PairwiseMRF):
    try:
        return brute_force_joint(mrf, cap=TRACE_CAP)
    except CapacityError:
        return None


def mean_field_solve(mrf: PairwiseMRF, init=None, max_sweeps: int = 500,
                     tol: float = 1e-10) -> tuple[np.ndarray, VIReport]:
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")
    q = uniform_marginals(mrf) if init is None else check_marginals(init, mrf.n_agents,
                                                                     mrf.n_actions, tol=1e-9)
    joint = _trace_joint(mrf)
    report = VIReport(objective="kl" if joint is not None else "free_energy")
    for sweep in range(1, max_sweeps + 1):
        new = mean_field_sweep(mrf, q)
        residual = float(np.max(np.abs(new - q)))
        q = new
        report.iterations_run = sweep
        report.final_residual = residual
        report.objective_trace.append(_objective(mrf, q, joint))
        if residual < tol:
            report.converged = True
            break
    return q, report


# ---------------------------------------------------------------------------
# loopy belief propagation


@dataclass
class BPMessages:
    """Normalized log-messages keyed by directed edge ``(i, j)`` (sender, receiver)."""

    log: dict

    def message(self, i: int, j: int) -> np.ndarray:
        return np.exp(self.log[(i, j)])

    def as_dict(self) -> dict:
        return {k: np.exp(v) for k, v in self.log.items()}


def uniform_messages(mrf: PairwiseMRF) -> BPMessages:
    A = mrf.n_actions
    return BPMessages({e: np.full(A, -np.log(A)) for e in mrf.graph.directed_edges()})


def _incoming(mrf: PairwiseMRF, msgs: BPMessages, i: int, exclude: int | None = None):
    total = np.zeros(mrf.n_actions)
    for k in mrf.graph.neighbors(i):
        if k != exclude:
            total = total + msgs.log[(k, i)]
    return total


def lbp_message_sweep(mrf: PairwiseMRF, msgs: BPMessages, damping: float = 0.0) -> BPMessages:
    """Synchronous update of every directed message, damped in log space."""
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    new = {}
    for (i, j) in mrf.graph.directed_edges():
        cavity = mrf.node_potentials[i] + _incoming(mrf, msgs, i, exclude=j)
        update = _normalize_log(logsumexp(cavity[:, None] + mrf.pair(i, j), axis=0))
        if damping > 0.0:
            update = _normalize_log((1.0 - damping) * update + damping * msgs.log[(i, j)])
        new[(i, j)] = update
    return BPMessages(new)


def lbp_beliefs(mrf: PairwiseMRF, msgs: BPMessages) -> np.ndarray:
    out = np.empty((mrf.n_agents, mrf.n_actions))
    for i in range(mrf.n_agents):
        out[i] = np.exp(_normalize_log(mrf.node_potentials[i] + _incoming(mrf, msgs, i)))
    return out


def lbp_edge_beliefs(mrf: PairwiseMRF, msgs: BPMessages) -> dict:
    """Pairwise beliefs q_ij[a_i, a_j] for every undirected edge ``i < j``."""
    out = {}
    for (i, j) in mrf.graph.edges:
        ci = mrf.node_potentials[i] + _incoming(mrf, msgs, i, exclude=j)
        cj = mrf.node_potentials[j] + _incoming(mrf, msgs, j, exclude=i)
        logt = ci[:, None] + cj[None, :] + mrf.pair(i, j)
        out[(i, j)] = np.exp(logt - logsumexp(logt))
    return out


def lbp_solve(mrf: PairwiseMRF, msgs: BPMessages | None = None, max_sweeps: int = 500,
              tol: float = 1e-10, damping: float | None = None) -> tuple[BPMessages, VIReport]:
    """Iterate LBP sweeps; damping defaults to 0 on forests and 0.5 otherwise."""
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")
    if damping is None:
        g = mrf.graph
        damping = 0.0 if len(g.edges) <= g.n_agents - _components(g) else 0.5
    msgs = uniform_messages(mrf) if msgs is None else msgs
    report = VIReport(objective="bethe")
    for sweep in range(1, max_sweeps + 1):
        new = lbp_message_sweep(mrf, msgs, damping)
        residual = max((float(np.max(np.abs(np.exp(new.log[e]) - np.exp(msgs.log[e]))))
                        for e in new.log), default=0.0)
        msgs = new
        report.iterations_run = sweep
        report.final_residual = residual
        report.objective_trace.append(
            bethe_free_energy(mrf, lbp_beliefs(mrf, msgs), lbp_edge_beliefs(mrf, msgs), check=False))
        if residual < tol:
            report.converged = True
            break
    return msgs, report


def _components(g) -> int:
    seen = np.zeros(g.n_agents, dtype=bool)
    count = 0
    for s in range(g.n_agents):
        if not seen[s]:
            count += 1
            seen |= np.isfinite(g.distances(s))
    return count


def bethe_free_energy(mrf: PairwiseMRF, node_beliefs, edge_beliefs: dict,
                      check: bool = True, tol: float = 1e-8) -> float:
    """Standard Bethe free energy with node-entropy counting (degree - 1)."""
    q = np.asarray(node_beliefs, dtype=np.float64)
    tables = {}
    for key, t in edge_beliefs.items():
        i, j = key
        t = np.asarray(t, dtype=np.float64)
        if i > j:
            i, j, t = j, i, t.T
        tables[(i, j)] = t
    if set(tables) != set(mrf.graph.edges):
        raise ValueError("edge beliefs must cover exactly the graph edges")
    if check:
        for (i, j), t in tables.items():
            if abs(t.sum() - 1.0) > tol:
                raise ValueError(f"edge belief ({i}, {j}) not normalized")
            if (np.max(np.abs(t.sum(axis=1) - q[i])) > tol
                    or np.max(np.abs(t.sum(axis=0) - q[j])) > tol):
                raise ValueError(f"edge belief ({i}, {j}) inconsistent with node beliefs")
    energy = 0.0
    for i in range(mrf.n_agents):
        d = mrf.graph.degree(i)
        logq = np.log(np.maximum(q[i], LOG_FLOOR))
        energy -= (d - 1) * float(np.sum(q[i] * (logq - mrf.node_potentials[i])))
    for (i, j), t in tables.items():
        logt = np.log(np.maximum(t, LOG_FLOOR))
        local = mrf.edge_potentials[(i, j)] + mrf.node_potentials[i][:, None] + mrf.node_potentials[j][None, :]
        energy += float(np.sum(t * (logt - local)))
    return energy
