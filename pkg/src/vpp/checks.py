"""Self-check suite behind ``vpp infer-check``: every structural invariant as a named check.

Each check returns ``(passed, detail)``; :func:`run_checks` collects them into a
JSON-ready report.  ``inject_fault`` corrupts the exact oracle used by the tree
check, as a negative control for the harness itself.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .baselines import config_diff, independent_config
from .config import STREAMS, dump, sub_seed, validate
from .envs import ConsensusGrid, SpreadGrid, TrafficGrid
from .graph import (Graph, build_grid, build_knn, build_random, build_random_graph,
                    build_random_tree)
from .mrf import (PairwiseMRF, brute_force_joint, exact_marginals, independent_mrf,
                  kl_product_vs_joint, product_table, random_mrf, softmax_rows)
from .policy import PolicyConfig, VPPPolicy, log_prob
from .sac import (Batch, CriticSet, ReplayBuffer, Transition, loss_pi, loss_q, loss_v,
                  soft_update_targets)
from .soft_oracle import (from_local_rewards, interaction_magnitudes, interaction_order_check,
                          soft_backward, terminal_mrf)
from .variational import (bethe_free_energy, lbp_beliefs, lbp_edge_beliefs, lbp_solve,
                          mean_field_solve, mean_field_sweep, uniform_marginals)


@dataclass
class Context:
    n_trials: int
    rng: np.random.Generator
    inject_fault: bool = False


def small_mrf(rng, max_agents=4, max_actions=3, tree=False, max_nodes=6, max_tree_actions=4):
    if tree:
        n = int(rng.integers(1, max_nodes + 1))
        g = build_random_tree(n, rng)
        A = int(rng.integers(2, max_tree_actions + 1))
    else:
        n = int(rng.integers(1, max_agents + 1))
        g = build_random_graph(n, 0.6, rng)
        A = int(rng.integers(2, max_actions + 1))
    return random_mrf(g, A, rng, scale=1.0)


def jitter_biases(store, rng, scale=0.1):
    """Move zero-initialised biases off the ReLU kink so finite differences are two-sided."""
    for name, p in store.items():
        if name.endswith(".b"):
            p.data[...] += rng.normal(scale=scale, size=p.shape)
    return store


def small_policy(rng, graph_rows=2, graph_cols=2, rounds=2, variant="mean_field", obs_dim=3,
                 n_actions=3, head_type="discrete", shared=True):
    n = graph_rows * graph_cols
    cfg = PolicyConfig(obs_dim=obs_dim, n_actions=n_actions, n_agents=n, variant=variant,
                       rounds=rounds, embed_dim=8, heads=2, hidden=8, head_type=head_type,
                       shared_weights=shared)
    return VPPPolicy(cfg, rng), build_grid(graph_rows, graph_cols)


# -- graph ------------------------------------------------------------------


def check_graph_symmetry(ctx):
    for _ in range(ctx.n_trials):
        n = int(ctx.rng.integers(2, 12))
        for g in (build_random_graph(n, 0.4, ctx.rng), build_knn(ctx.rng.random((n, 2)), 1),
                  build_random(n, 1, int(ctx.rng.integers(1 << 30)))):
            A = g.adjacency()
            if not (np.array_equal(A, A.T) and not A.diagonal().any()):
                return False, {"graph": g.to_json()}
            if len(set(g.edges)) != len(g.edges):
                return False, {"graph": g.to_json(), "reason": "duplicate edge"}
    return True, {}


def check_grid_degrees(ctx):
    for r, c in itertools.product(range(2, 6), repeat=2):
        g = build_grid(r, c)
        degs = {g.degree(i) for i in range(g.n_agents)}
        if not degs <= {2, 3, 4}:
            return False, {"rows": r, "cols": c, "degrees": sorted(degs)}
    return True, {}


def check_knn_permutation(ctx):
    for _ in range(ctx.n_trials):
        n = int(ctx.rng.integers(3, 10))
        pts = ctx.rng.random((n, 2))
        k = int(ctx.rng.integers(1, n))
        perm = ctx.rng.permutation(n)
        moved = np.empty_like(pts)
        moved[perm] = pts
        if build_knn(pts, k).relabel(perm).edges != build_knn(moved, k).edges:
            return False, {"n": n, "k": k}
    return True, {}


# -- exact MRF --------------------------------------------------------------


def check_independent_marginals(ctx):
    worst = 0.0
    for _ in range(ctx.n_trials):
        psi = ctx.rng.uniform(-1, 1, (int(ctx.rng.integers(1, 5)), int(ctx.rng.integers(2, 4))))
        m = exact_marginals(brute_force_joint(independent_mrf(psi)))
        worst = max(worst, float(np.max(np.abs(m - softmax_rows(psi)))))
    return worst <= 1e-12, {"max_abs_error": worst}


def check_shift_invariance(ctx):
    worst = 0.0
    for _ in range(ctx.n_trials):
        mrf = small_mrf(ctx.rng)
        i = int(ctx.rng.integers(mrf.n_agents))
        node = mrf.node_potentials.copy()
        node[i] += ctx.rng.uniform(-5, 5)
        shifted = PairwiseMRF(mrf.graph, mrf.n_actions, node, mrf.edge_potentials)
        p0 = brute_force_joint(mrf).probabilities
        p1 = brute_force_joint(shifted).probabilities
        worst = max(worst, float(np.max(np.abs(p0 - p1))))
        q0, _ = mean_field_solve(mrf)
        q1, _ = mean_field_solve(shifted)
        m0, _ = lbp_solve(mrf)
        m1, _ = lbp_solve(shifted)
        worst = max(worst, float(np.max(np.abs(q0 - q1))),
                    float(np.max(np.abs(lbp_beliefs(mrf, m0) - lbp_beliefs(shifted, m1)))))
    return worst <= 1e-9, {"max_abs_change": worst}


def check_kl_factorized(ctx):
    worst = 0.0
    for _ in range(ctx.n_trials):
        psi = ctx.rng.uniform(-1, 1, (int(ctx.rng.integers(1, 5)), int(ctx.rng.integers(2, 4))))
        J = brute_force_joint(independent_mrf(psi))
        worst = max(worst, abs(kl_product_vs_joint(exact_marginals(J), J)))
    return worst <= 1e-12, {"max_kl": worst}


# -- variational ------------------------------------------------------------


def check_mean_field_monotone(ctx):
    worst_rise, worst_end = -np.inf, -np.inf
    for _ in range(ctx.n_trials):
        mrf = small_mrf(ctx.rng)
        J = brute_force_joint(mrf)
        q = uniform_marginals(mrf)
        trace = [kl_product_vs_joint(q, J)]
        for _ in range(50):
            q = mean_field_sweep(mrf, q)
            trace.append(kl_product_vs_joint(q, J))
        t = np.array(trace)
        worst_rise = max(worst_rise, float(np.max(np.diff(t))))
        worst_end = max(worst_end, float(t[-1] - t[0]))
    ok = worst_rise <= 1e-10 and worst_end <= 0.0
    return ok, {"max_increase": worst_rise, "max_final_minus_initial": worst_end}


def check_tree_exactness(ctx):
    worst_b, worst_f, worst_sweeps = 0.0, 0.0, 0
    for _ in range(ctx.n_trials):
        mrf = small_mrf(ctx.rng, tree=True)
        J = brute_force_joint(mrf)
        oracle = mrf
        if ctx.inject_fault:
            oracle = PairwiseMRF(mrf.graph, mrf.n_actions, mrf.node_potentials,
                                 {e: -t for e, t in mrf.edge_potentials.items()})
            J = brute_force_joint(oracle)
        budget = max(2 * mrf.graph.diameter(), 1)
        msgs, rep = lbp_solve(mrf, max_sweeps=budget + 1, tol=1e-13, damping=0.0)
        b = lbp_beliefs(mrf, msgs)
        F = bethe_free_energy(mrf, b, lbp_edge_beliefs(mrf, msgs))
        worst_b = max(worst_b, float(np.max(np.abs(b - exact_marginals(J)))))
        worst_f = max(worst_f, abs(F + J.log_partition))
        worst_sweeps = max(worst_sweeps, rep.iterations_run - budget)
    ok = worst_b <= 1e-8 and worst_f <= 1e-8 and worst_sweeps <= 1
    return ok, {"max_belief_error": worst_b, "max_bethe_gap": worst_f,
                "sweeps_over_2diam": worst_sweeps}


def check_solver_determinism(ctx):
    mrf = small_mrf(ctx.rng)
    a = mean_field_solve(mrf)[1].to_json(), lbp_solve(mrf)[1].to_json()
    b = mean_field_solve(mrf)[1].to_json(), lbp_solve(mrf)[1].to_json()
    return a == b, {}


# -- autodiff ---------------------------------------------------------------


def _op_cases(rng):
    def P(*shape, lo=-1.0, hi=1.0):
        return Parameter(rng.uniform(lo, hi, shape))
    x, y = P(3, 4), P(3, 4)
    pos = P(3, 4, lo=0.5, hi=2.0)
    m, w = P(2, 3, 4), P(4, 5)
    idx = np.array([0, 2, 2, 1])
    return {
        "add": ([x, y], lambda: ad.sum(ad.add(x, y) * y)),
        "sub": ([x, y], lambda: ad.sum(ad.sub(x, y) * x)),
        "mul": ([x, y], lambda: ad.sum(ad.mul(x, y))),
        "div": ([x, pos], lambda: ad.sum(ad.div(x, pos))),
        "neg": ([x], lambda: ad.sum(ad.neg(x) * x)),
        "power": ([pos], lambda: ad.sum(ad.power(pos, 1.7))),
        "square": ([x], lambda: ad.sum(ad.square(x))),
        "relu": ([x], lambda: ad.sum(ad.relu(x) * y.data)),
        "tanh": ([x], lambda: ad.sum(ad.tanh(x))),
        "exp": ([x], lambda: ad.sum(ad.exp(x))),
        "log": ([pos], lambda: ad.sum(ad.log(pos))),
        "clip": ([x], lambda: ad.sum(ad.clip(x, -0.5, 0.5) * y.data)),
        "softmax": ([x], lambda: ad.sum(ad.softmax(x, axis=-1) * y.data)),
        "log_softmax": ([x], lambda: ad.sum(ad.log_softmax(x, axis=0) * y.data)),
        "sum": ([m], lambda: ad.sum(ad.sum(m, axis=1) ** 2)),
        "mean": ([m], lambda: ad.sum(ad.mean(m, axis=(0, 2), keepdims=True) ** 2)),
        "reshape": ([m], lambda: ad.sum(ad.reshape(m, (6, 4)) * np.arange(24.0).reshape(6, 4))),
        "transpose": ([m], lambda: ad.sum(ad.transpose(m, (2, 0, 1)) * np.arange(24.0).reshape(4, 2, 3))),
        "concat": ([x, y], lambda: ad.sum(ad.concat([x, y], axis=0) ** 2)),
        "gather_rows": ([x], lambda: ad.sum(ad.gather_rows(x, idx) ** 2)),
        "matmul": ([m, w], lambda: ad.sum(ad.matmul(m, w) ** 2)),
    }


def check_op_gradcheck(ctx):
    cases = _op_cases(np.random.default_rng(sub_seed(int(ctx.rng.integers(1 << 30)), "ops")))
    missing = sorted(set(ad.OPS) - set(cases))
    failures = {}
    for name, (params, fn) in cases.items():
        rep = ad.gradcheck(fn, params)
        if not rep.passed:
            failures[name] = rep.max_rel_error
    return not failures and not missing, {"failures": failures, "unchecked_ops": missing}


def check_grad_accumulation(ctx):
    p = Parameter(ctx.rng.normal(size=(4, 3)))
    w = ctx.rng.normal(size=(3, 2))

    def run():
        with Tape():
            ad.backward(ad.sum(ad.tanh(ad.matmul(p, w))))
    run()
    once = p.grad.copy()
    run()
    return bool(np.array_equal(p.grad, 2 * once)), {}


def check_tape_determinism(ctx):
    seed = int(ctx.rng.integers(1 << 30))
    outs = []
    for _ in range(2):
        pol, g = small_policy(np.random.default_rng(seed))
        obs = np.random.default_rng(seed + 1).normal(size=(2, 4, 3))
        with Tape():
            loss = ad.sum(pol(obs, g.adjacency()).log_probs)
            ad.backward(loss)
        outs.append((loss.item(), [p.grad.copy() for p in pol.store]))
    same = outs[0][0] == outs[1][0] and all(np.array_equal(a, b) for a, b in zip(outs[0][1], outs[1][1]))
    return same, {}


# -- policy -----------------------------------------------------------------


def check_permutation_equivariance(ctx):
    worst = 0.0
    for variant in ("mean_field", "loopy_bp"):
        for _ in range(max(1, ctx.n_trials // 20)):
            pol, g = small_policy(np.random.default_rng(int(ctx.rng.integers(1 << 30))), 2, 3,
                                  variant=variant)
            obs = ctx.rng.normal(size=(2, 6, 3))
            perm = ctx.rng.permutation(6)
            moved = np.empty_like(obs)
            moved[:, perm] = obs
            with ad.no_grad():
                p0 = pol(obs, g.adjacency()).probs.data
                p1 = pol(moved, g.relabel(perm).adjacency()).probs.data
            worst = max(worst, float(np.max(np.abs(p1[:, perm] - p0))))
    return worst <= 1e-12, {"max_abs_error": worst}


def locality_violation(pol: VPPPolicy, g: Graph, horizon: int, rng) -> float:
    """Largest change in q_i caused by perturbing an agent farther than ``horizon`` hops."""
    n = g.n_agents
    obs = rng.normal(size=(1, n, pol.config.obs_dim))
    adj = g.adjacency()
    with ad.no_grad():
        base = pol(obs, adj).probs.data[0]
        worst = 0.0
        for j in range(n):
            bumped = obs.copy()
            bumped[0, j] += rng.normal(size=pol.config.obs_dim) * 3.0
            q = pol(bumped, adj).probs.data[0]
            far = g.distances(j) > horizon
            if far.any():
                worst = max(worst, float(np.max(np.abs(q[far] - base[far]))))
    return worst


def check_locality_horizon(ctx):
    out = {}
    for variant, extra in (("mean_field", 0), ("loopy_bp", 1)):
        for M in (0, 1, 2):
            pol, g = small_policy(np.random.default_rng(int(ctx.rng.integers(1 << 30))), 3, 3,
                                  rounds=M, variant=variant)
            out[f"{variant}_M{M}"] = locality_violation(pol, g, M + extra, ctx.rng)
    return all(v == 0.0 for v in out.values()), out


def check_distribution_validity(ctx):
    pol, g = small_policy(np.random.default_rng(int(ctx.rng.integers(1 << 30))), 3, 3)
    gpol, _ = small_policy(np.random.default_rng(int(ctx.rng.integers(1 << 30))), 3, 3,
                           head_type="gaussian")
    with ad.no_grad():
        for _ in range(max(1, ctx.n_trials // 10)):
            obs = ctx.rng.normal(scale=10.0, size=(4, 9, 3))
            d = pol(obs, g.adjacency())
            if np.max(np.abs(d.probs.data.sum(-1) - 1.0)) > 1e-9 or np.any(d.probs.data < 0):
                return False, {"reason": "categorical off the simplex"}
            gd = gpol(obs, g.adjacency())
            if np.any(gd.log_std.data < -20.0) or np.any(gd.log_std.data > 2.0):
                return False, {"reason": "log-std outside clamp"}
    return True, {}


# -- soft actor-critic ------------------------------------------------------


def sac_fixture(rng, n_rows=2, n_cols=2, batch=6, n_actions=3, obs_dim=3, alpha=0.2):
    pol, g = small_policy(rng, n_rows, n_cols, n_actions=n_actions, obs_dim=obs_dim)
    n = g.n_agents
    critics = CriticSet(n, pol.config.obs_dim, n_actions, rng, hidden=8, alpha=alpha)
    for store in (pol.store, critics.value, critics.qvalue):
        jitter_biases(store, rng)
    adj = np.broadcast_to(g.adjacency(), (batch, n, n)).copy()
    b = Batch(obs=rng.normal(size=(batch, n, obs_dim)), actions=rng.integers(0, n_actions, (batch, n)),
              rewards=rng.normal(size=(batch, n)), next_obs=rng.normal(size=(batch, n, obs_dim)),
              adj=adj, next_adj=adj.copy(), steps=np.arange(batch))
    return pol, critics, b



def gradient_isolation(pol, critics, batch, seed=0) -> dict:
    """Max |grad| each loss leaves on each parameter group (should be 0 off-group)."""
    groups = {"theta": pol.store, "eta": critics.value, "kappa": critics.qvalue}
    losses = {
        "loss_q": lambda: loss_q(batch, critics, pol),
        "loss_v": lambda: loss_v(batch, critics, pol, np.random.default_rng(seed)),
        "loss_pi": lambda: loss_pi(batch, critics, pol, np.random.default_rng(seed)),
    }
    out = {}
    for lname, fn in losses.items():
        for s in groups.values():
            s.zero_grad()
        with Tape():
            ad.backward(fn())
        out[lname] = {g: max(float(np.max(np.abs(p.grad))) for p in s) for g, s in groups.items()}
    return out


def check_gradient_isolation(ctx):
    pol, critics, batch = sac_fixture(np.random.default_rng(int(ctx.rng.integers(1 << 30))))
    iso = gradient_isolation(pol, critics, batch)
    own = {"loss_q": "kappa", "loss_v": "eta", "loss_pi": "theta"}
    ok = all(v == 0.0 for l, d in iso.items() for g, v in d.items() if g != own[l])
    ok = ok and all(iso[l][own[l]] > 0.0 for l in own)
    return ok, iso


def check_target_hygiene(ctx):
    pol, critics, batch = sac_fixture(np.random.default_rng(int(ctx.rng.integers(1 << 30))))
    target_ids = {id(a) for a in critics.value_target.values()}
    for fn in (lambda: loss_q(batch, critics, pol),
               lambda: loss_v(batch, critics, pol, np.random.default_rng(0)),
               lambda: loss_pi(batch, critics, pol, np.random.default_rng(0))):
        with Tape() as tape:
            fn()
        for node in tape.nodes:
            for p in node.parents:
                if id(p.data) in target_ids or isinstance(p, Parameter) and p.name is None:
                    return False, {"op": node.op}
    before = {k: v.copy() for k, v in critics.value_target.items()}
    soft_update_targets(critics, 0.5)
    moved = all(np.allclose(critics.value_target[k], 0.5 * before[k] + 0.5 * critics.value[k].data)
                for k in before)
    return moved, {}


def check_replay_fifo(ctx):
    buf = ReplayBuffer(capacity=2, seed=0)
    trs = [Transition(np.full((2, 1), float(k)), np.zeros(2, dtype=np.int64), np.zeros(2),
                      np.zeros((2, 1)), np.eye(2, dtype=bool), np.eye(2, dtype=bool), k)
           for k in range(3)]
    for t in trs:
        buf.push(t)
    steps = [t.step for t in buf.contents()]
    return steps == [1, 2] and len(buf) == 2, {"contents": steps}


def vq_decomposition(pol, critics, obs, adj, rng, n_samples=10_000):
    """Exact sum_i E_q[Q_i - alpha log q_i] vs its Monte Carlo estimate on an enumerable instance."""
    n, A = pol.config.n_agents, pol.config.n_actions
    feats = critics.features(pol, obs[None], adj)
    with ad.no_grad():
        dist = pol(obs[None], adj)
        q = dist.probs.data[0]
        joint = np.array(list(itertools.product(range(A), repeat=n)))
        Qj = critics.q(np.broadcast_to(feats, (len(joint),) + feats.shape[1:]),
                       critics.encode_actions(joint, adj)).data
    logq = np.log(q)
    per_joint = (Qj - critics.alpha * logq[np.arange(n), joint]).sum(-1)
    weights = np.prod(q[np.arange(n), joint], axis=-1)
    exact = float(weights @ per_joint)
    draws = rng.choice(len(joint), size=n_samples, p=weights / weights.sum())
    vals = per_joint[draws]
    return exact, float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_samples))


def check_vq_decomposition(ctx):
    rng = np.random.default_rng(int(ctx.rng.integers(1 << 30)))
    pol, _ = small_policy(rng, 1, 2, n_actions=2)
    critics = CriticSet(2, pol.config.obs_dim, 2, rng, hidden=8)
    adj = build_grid(1, 2).adjacency()
    exact, mc, se = vq_decomposition(pol, critics, rng.normal(size=(2, 3)), adj, rng)
    return abs(exact - mc) <= 3 * se, {"exact": exact, "monte_carlo": mc, "stderr": se}


# -- environments -----------------------------------------------------------


def check_reward_locality(ctx):
    worst = 0.0
    env = ConsensusGrid(2, 3)
    env.reset()
    g = env.graph()
    for a in itertools.product(range(2), repeat=g.n_agents):
        r0 = env._step(np.array(a))
        for j in range(g.n_agents):
            b = np.array(a)
            b[j] ^= 1
            r1 = env._step(b)
            far = np.ones(g.n_agents, dtype=bool)
            far[[j, *g.neighbors(j)]] = False
            worst = max(worst, float(np.max(np.abs(r1[far] - r0[far]), initial=0.0)))
    spread = SpreadGrid(n_agents=4, n_landmarks=2, k_neighbors=1, world_size=3.0, seed=int(ctx.rng.integers(1 << 30)))
    for _ in range(ctx.n_trials):
        spread.reset()
        g = spread.graph()
        start = spread.positions.copy()
        for a in itertools.product(range(5), repeat=4):
            spread.positions = start.copy()
            spread._graph = g
            r0 = spread._step(np.array(a))
            for j in range(4):
                b = np.array(a)
                b[j] = (b[j] + 1) % 5
                spread.positions = start.copy()
                spread._graph = g
                r1 = spread._step(b)
                far = np.ones(4, dtype=bool)
                far[[j, *g.neighbors(j)]] = False
                worst = max(worst, float(np.max(np.abs(r1[far] - r0[far]), initial=0.0)))
        if ctx.n_trials > 3:
            break
    return worst == 0.0, {"max_nonlocal_change": worst}


def check_env_determinism(ctx):
    seed = int(ctx.rng.integers(1 << 30))
    for make in (lambda: ConsensusGrid(seed=seed), lambda: TrafficGrid(2, 2, 1.0, seed=seed),
                 lambda: SpreadGrid(6, 3, k_neighbors=2, seed=seed)):
        trajs = []
        for _ in range(2):
            env = make()
            acts = np.random.default_rng(seed)
            obs = [env.reset()]
            done = False
            while not done:
                o, r, done = env.step(acts.integers(0, env.n_actions, env.n_agents))
                obs.append(np.concatenate([o.ravel(), r]))
            trajs.append(np.concatenate([x.ravel() for x in obs]))
        if not np.array_equal(*trajs):
            return False, {"env": type(env).__name__}
    return True, {}


def check_episode_termination(ctx):
    for env in (ConsensusGrid(), TrafficGrid(2, 2), SpreadGrid(5, 2, k_neighbors=2)):
        env.reset()
        flags = [env.step(np.zeros(env.n_agents, dtype=np.int64))[2] for _ in range(env.episode_length)]
        if flags[-1] is not True or any(flags[:-1]):
            return False, {"env": type(env).__name__}
    return True, {}


# -- soft oracle ------------------------------------------------------------


def _pairwise_mdp(rng, n, horizon, n_states=1):
    g = build_random_graph(n, 0.7, rng)
    A = 2
    tables = {e: rng.uniform(-1, 1, (A, A)) for e in g.edges}
    unary = rng.uniform(-1, 1, (n, n_states, A))
    trans = None
    if n_states > 1:
        trans = rng.dirichlet(np.ones(n_states), size=(n_states,) + (A,) * n)

    def reward(i, s, ai, anbrs):
        r = unary[i, s, ai]
        for j, aj in zip(g.neighbors(i), anbrs):
            t = tables[(min(i, j), max(i, j))]
            r += 0.5 * (t[ai, aj] if i < j else t[aj, ai])
        return r
    return from_local_rewards(g, A, n_states, reward, transitions=trans, horizon=horizon)


def check_soft_policy_normalization(ctx):
    worst_sum, worst_v = 0.0, 0.0
    for _ in range(max(1, ctx.n_trials // 5)):
        mdp = _pairwise_mdp(ctx.rng, int(ctx.rng.integers(1, 5)), int(ctx.rng.integers(1, 4)))
        sol = soft_backward(mdp)
        axes = tuple(range(1, mdp.n_agents + 1))
        for Q, V, pi in zip(sol.Q, sol.V, sol.policy):
            worst_sum = max(worst_sum, float(np.max(np.abs(pi.sum(axis=axes) - 1.0))))
            m = Q.max(axis=axes)
            lse = m + np.log(np.exp(Q - m.reshape((-1,) + (1,) * mdp.n_agents)).sum(axis=axes))
            worst_v = max(worst_v, float(np.max(np.abs(V - lse))))
    return worst_sum <= 1e-12 and worst_v <= 1e-12, {"max_row_sum_error": worst_sum,
                                                     "max_logsumexp_error": worst_v}


def check_pairwise_terminal(ctx):
    worst = 0.0
    for _ in range(max(1, ctx.n_trials // 5)):
        mdp = _pairwise_mdp(ctx.rng, int(ctx.rng.integers(2, 5)), 1)
        worst = max(worst, interaction_order_check(soft_backward(mdp).policy[0][0], mdp.graph))
    return worst <= 1e-10, {"max_nonclique_interaction": worst}


def check_higher_order_report(ctx):
    """T = 2 with action-dependent transitions: higher-order terms are reported, never asserted."""
    worst = {}
    for _ in range(max(1, ctx.n_trials // 5)):
        mdp = _pairwise_mdp(ctx.rng, int(ctx.rng.integers(3, 5)), 2, n_states=2)
        for order, mag in interaction_magnitudes(soft_backward(mdp).policy[0][0]).items():
            worst[order] = max(worst.get(order, 0.0), mag)
    return True, {f"order_{k}": v for k, v in sorted(worst.items())}


def check_soft_vs_brute_force(ctx):
    worst = 0.0
    for _ in range(max(1, ctx.n_trials // 5)):
        mdp = _pairwise_mdp(ctx.rng, int(ctx.rng.integers(1, 5)), 1)
        pi = soft_backward(mdp).policy[0][0]
        J = brute_force_joint(terminal_mrf(mdp))
        n = mdp.n_agents
        m = np.stack([pi.sum(axis=tuple(k for k in range(n) if k != i)) for i in range(n)])
        worst = max(worst, float(np.max(np.abs(m - exact_marginals(J)))))
    return worst <= 1e-12, {"max_marginal_error": worst}


# -- configuration ----------------------------------------------------------


def check_baseline_diff(ctx):
    cfg = validate({"env.name": "consensus_grid", "train.total_steps": 100})
    diff = config_diff(cfg, independent_config(cfg))
    return list(diff) == ["policy.rounds"], {"diff": sorted(diff)}


def check_config_roundtrip(ctx):
    import json
    for name in ("consensus_grid", "traffic_grid", "spread_grid"):
        cfg = validate({"env.name": name, "train.total_steps": 100})
        if validate(json.loads(dump(cfg))) != cfg:
            return False, {"env": name}
    return True, {}


def check_seed_streams(ctx):
    seeds = {s: sub_seed(7, s) for s in STREAMS}
    distinct = len(set(seeds.values())) == len(STREAMS)
    stable = all(sub_seed(7, s) == v for s, v in seeds.items())
    return distinct and stable, {"streams": list(STREAMS)}


CHECKS = {
    "graph.symmetry": check_graph_symmetry,
    "graph.grid_degrees": check_grid_degrees,
    "graph.knn_permutation": check_knn_permutation,
    "mrf.independent_marginals": check_independent_marginals,
    "mrf.shift_invariance": check_shift_invariance,
    "mrf.kl_factorized": check_kl_factorized,
    "variational.mean_field_monotone": check_mean_field_monotone,
    "variational.tree_exactness": check_tree_exactness,
    "variational.determinism": check_solver_determinism,
    "autodiff.op_gradcheck": check_op_gradcheck,
    "autodiff.accumulation": check_grad_accumulation,
    "autodiff.tape_determinism": check_tape_determinism,
    "policy.permutation_equivariance": check_permutation_equivariance,
    "policy.locality_horizon": check_locality_horizon,
    "policy.distribution_validity": check_distribution_validity,
    "sac.vq_decomposition": check_vq_decomposition,
    "sac.gradient_isolation": check_gradient_isolation,
    "sac.target_hygiene": check_target_hygiene,
    "sac.replay_fifo": check_replay_fifo,
    "envs.reward_locality": check_reward_locality,
    "envs.determinism": check_env_determinism,
    "envs.termination": check_episode_termination,
    "soft_oracle.normalization": check_soft_policy_normalization,
    "soft_oracle.pairwise_terminal": check_pairwise_terminal,
    "soft_oracle.higher_order_report": check_higher_order_report,
    "soft_oracle.matches_brute_force": check_soft_vs_brute_force,
    "baselines.single_field_diff": check_baseline_diff,
    "cli.config_roundtrip": check_config_roundtrip,
    "cli.seed_streams": check_seed_streams,
}


def run_checks(n_trials: int = 100, seed: int = 0, inject_fault: bool = False,
               only: list[str] | None = None) -> dict:
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    results = []
    t0 = time.perf_counter()
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        ctx = Context(n_trials, np.random.default_rng(sub_seed(seed, name)), inject_fault)
        start = time.perf_counter()
        try:
            passed, detail = fn(ctx)
        except Exception as err:    # a crashing check is a failed check
            passed, detail = False, {"error": f"{type(err).__name__}: {err}"}
        results.append({"name": name, "passed": bool(passed), "detail": detail,
                        "seconds": round(time.perf_counter() - start, 4)})
    failures = [r["name"] for r in results if not r["passed"]]
    return {"passed": not failures, "failures": failures, "n_trials": n_trials, "seed": seed,
            "inject_fault": inject_fault, "seconds": round(time.perf_counter() - t0, 3),
            "checks": results}
