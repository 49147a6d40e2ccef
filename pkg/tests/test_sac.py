import itertools
import math

import numpy as np
import pytest

from vpp import autodiff as ad
from vpp.autodiff import Tape, gradcheck
from vpp.checks import gradient_isolation, sac_fixture, small_policy, vq_decomposition
from vpp.envs import EnvironmentFault, NetworkedEnv
from vpp.graph import Graph, build_grid
from vpp.policy import PolicyConfig, VPPPolicy
from vpp.sac import (Batch, CriticSet, DataIntegrityError, ReplayBuffer, Trainer, TrainingAborted,
                     TrainSettings, Transition, loss_pi, loss_q, loss_v, q_target,
                     soft_update_targets)


def transition(k, n=2, obs_dim=1):
    return Transition(np.full((n, obs_dim), float(k)), np.zeros(n, dtype=np.int64), np.zeros(n),
                      np.zeros((n, obs_dim)), np.eye(n, dtype=bool) & False,
                      np.zeros((n, n), dtype=bool), k)


def set_constant(store, prefix, value):
    """Make a stacked critic output the constant ``value`` (per agent if an array)."""
    store[f"{prefix}.out.W"].data[...] = 0.0
    store[f"{prefix}.out.b"].data[...] = np.reshape(value, (-1, 1, 1))


# -- targets and buffer -----------------------------------------------------


def test_q_target_arithmetic():
    np.testing.assert_array_equal(q_target([1.0, -2.0], [5.0, 7.0], 0.0), [1.0, -2.0])
    assert q_target(1.0, 2.0, 0.95) == pytest.approx(2.9, abs=1e-15)
    r, v = np.random.default_rng(0).normal(size=(2, 7, 3))
    batched = q_target(r, v, 0.95)
    for idx in np.ndindex(r.shape):
        assert batched[idx] == r[idx] + 0.95 * v[idx]


def test_replay_fifo_capacity_two():
    buf = ReplayBuffer(capacity=2, seed=0)
    for k in range(3):
        buf.push(transition(k))
    assert [t.step for t in buf.contents()] == [1, 2]
    assert len(buf) == 2


def test_replay_ring_order_and_growth():
    buf = ReplayBuffer(capacity=3000, seed=1)
    for k in range(3500):
        buf.push(transition(k))
    steps = [t.step for t in buf.contents()]
    assert steps == list(range(500, 3500))


def test_replay_sampling_uniform():
    buf = ReplayBuffer(capacity=4, seed=3)
    for k in range(6):
        buf.push(transition(k))
    draws = buf.sample(40_000).steps
    freq = np.bincount(draws, minlength=6)[2:] / 40_000
    assert set(np.unique(draws)) == {2, 3, 4, 5}
    assert np.max(np.abs(freq - 0.25)) < 0.01


def test_replay_rejects_shape_change_and_empty():
    buf = ReplayBuffer(capacity=5)
    with pytest.raises(ValueError):
        buf.sample(1)
    buf.push(transition(0, n=2))
    with pytest.raises(ValueError):
        buf.push(transition(1, n=3))


def test_transition_validation():
    with pytest.raises(ValueError):
        Transition(np.zeros((2, 1)), np.zeros(2), np.array([0.0, np.nan]), np.zeros((2, 1)),
                   np.zeros((2, 2), bool), np.zeros((2, 2), bool), 0)


# -- losses -----------------------------------------------------------------


def test_loss_q_zero_when_matching_target():
    pol, critics, b = sac_fixture(np.random.default_rng(0))
    b.rewards[...] = 0.0
    set_constant(critics.qvalue, "qvalue", 0.0)
    for k in critics.value_target:
        critics.value_target[k][...] = 0.0
    assert loss_q(b, critics, pol).item() == 0.0


def test_loss_q_half_squared_error():
    pol, critics, b = sac_fixture(np.random.default_rng(0), batch=1)
    b.rewards[...] = 2.0
    set_constant(critics.qvalue, "qvalue", 0.0)
    for k in critics.value_target:
        critics.value_target[k][...] = 0.0
    assert loss_q(b, critics, pol).item() == pytest.approx(2.0, abs=1e-15)


def test_loss_q_uses_neighbor_actions_only():
    pol, critics, b = sac_fixture(np.random.default_rng(1), batch=1, n_rows=1, n_cols=3)
    before = critics.q(critics.features(pol, b.obs, b.adj), critics.encode_actions(b.actions, b.adj)).data
    changed = b.actions.copy()
    changed[0, 2] = (changed[0, 2] + 1) % 3                # agent 2 is not adjacent to agent 0
    after = critics.q(critics.features(pol, b.obs, b.adj), critics.encode_actions(changed, b.adj)).data
    assert after[0, 0] == before[0, 0]
    assert after[0, 1] != before[0, 1]


def test_missing_neighbor_action_is_integrity_error():
    pol, critics, b = sac_fixture(np.random.default_rng(0))
    b.actions[0, 1] = -1
    with pytest.raises(DataIntegrityError):
        loss_q(b, critics, pol)
    b.actions = b.actions[:, :2]
    with pytest.raises(DataIntegrityError):
        loss_q(b, critics, pol)


def test_loss_q_gradcheck():
    pol, critics, b = sac_fixture(np.random.default_rng(2), batch=3)
    rep = gradcheck(lambda: loss_q(b, critics, pol), list(critics.qvalue))
    assert rep.passed, rep


def test_loss_v_gradcheck():
    pol, critics, b = sac_fixture(np.random.default_rng(3), batch=3)
    rep = gradcheck(lambda: loss_v(b, critics, pol, np.random.default_rng(0)), list(critics.value))
    assert rep.passed, rep


def deterministic_policy(pol):
    pol.store["head.logits.W"].data[...] = 0.0
    pol.store["head.logits.b"].data[...] = 0.0
    pol.store["head.logits.b"].data[0] = 60.0


@pytest.mark.parametrize("alpha", [0.0, 0.2])
def test_loss_v_zero_for_deterministic_policy(alpha):
    pol, critics, b = sac_fixture(np.random.default_rng(4), alpha=alpha)
    deterministic_policy(pol)
    set_constant(critics.qvalue, "qvalue", 1.5)
    with ad.no_grad():
        logq0 = pol(b.obs, b.adj).log_probs.data[0, 0, 0]
    set_constant(critics.value, "value", 1.5 - alpha * logq0)
    assert loss_v(b, critics, pol, np.random.default_rng(0)).item() <= 1e-24


def test_loss_v_matches_enumeration_oracle():
    rng = np.random.default_rng(5)
    pol, _ = small_policy(rng, 1, 2, n_actions=2)
    critics = CriticSet(2, pol.config.obs_dim, 2, rng, hidden=8)
    adj = build_grid(1, 2).adjacency()
    obs = rng.normal(size=(2, 3))
    n = 10_000
    b = Batch(np.broadcast_to(obs, (n, 2, 3)).copy(), np.zeros((n, 2), np.int64), np.zeros((n, 2)),
              np.broadcast_to(obs, (n, 2, 3)).copy(), np.broadcast_to(adj, (n, 2, 2)).copy(),
              np.broadcast_to(adj, (n, 2, 2)).copy(), np.arange(n))
    estimate = loss_v(b, critics, pol, np.random.default_rng(6)).item()

    feats = critics.features(pol, obs[None], adj)
    with ad.no_grad():
        q = pol(obs[None], adj).probs.data[0]
        v = critics.v(feats).data[0]
        joint = np.array(list(itertools.product(range(2), repeat=2)))
        Q = critics.q(np.repeat(feats, 4, axis=0), critics.encode_actions(joint, adj)).data
    w = q[0, joint[:, 0]] * q[1, joint[:, 1]]
    per = 0.5 * (v[None] - (Q - critics.alpha * np.log(q[[0, 1], joint]))) ** 2   # (4, 2)
    sample_value = per.mean(axis=1)
    exact = float(w @ sample_value)
    sd = math.sqrt(float(w @ (sample_value - exact) ** 2) / n)
    assert abs(estimate - exact) <= 3 * sd, (estimate, exact, sd)


def test_loss_pi_entropy_identity():
    pol, critics, b = sac_fixture(np.random.default_rng(7), alpha=1.0)
    set_constant(critics.qvalue, "qvalue", 0.0)
    with ad.no_grad():
        d = pol(b.obs, b.adj)
    expected = -d.entropy().sum(-1).mean()
    assert loss_pi(b, critics, pol, np.random.default_rng(0)).item() == pytest.approx(expected, abs=1e-12)


def test_loss_pi_stationary_at_uniform_when_q_is_zero():
    pol, critics, b = sac_fixture(np.random.default_rng(8), alpha=1.0)
    set_constant(critics.qvalue, "qvalue", 0.0)
    pol.store["head.logits.W"].data[...] = 0.0
    pol.store["head.logits.b"].data[...] = 0.0
    pol.store.zero_grad()
    with Tape():
        ad.backward(loss_pi(b, critics, pol, np.random.default_rng(0)))
    assert max(np.max(np.abs(p.grad)) for p in pol.store) <= 1e-12


def test_constant_q_gives_no_policy_gradient():
    pol, critics, b = sac_fixture(np.random.default_rng(9), alpha=0.0)
    set_constant(critics.qvalue, "qvalue", 3.0)
    pol.store.zero_grad()
    with Tape():
        ad.backward(loss_pi(b, critics, pol, np.random.default_rng(0), mode="exact"))
    assert max(np.max(np.abs(p.grad)) for p in pol.store) <= 1e-9


def test_loss_pi_exact_gradcheck():
    pol, critics, b = sac_fixture(np.random.default_rng(10), batch=2)
    # critic inputs are detached policy states, so hold them fixed while differencing
    feats = critics.features(pol, b.obs, b.adj)
    rep = gradcheck(lambda: loss_pi(b, critics, pol, np.random.default_rng(0), mode="exact",
                                    cache={"feats": feats}), list(pol.store))
    assert rep.passed, rep


def test_sampled_mode_value_is_objective_estimate():
    pol, critics, b = sac_fixture(np.random.default_rng(11), batch=4000)
    exact = loss_pi(b, critics, pol, np.random.default_rng(0), mode="exact").item()
    sampled = loss_pi(b, critics, pol, np.random.default_rng(1), mode="sampled").item()
    assert abs(exact - sampled) < 0.05 * max(1.0, abs(exact))


def test_gradient_isolation_is_exact():
    pol, critics, b = sac_fixture(np.random.default_rng(12))
    iso = gradient_isolation(pol, critics, b)
    assert iso["loss_q"]["theta"] == iso["loss_q"]["eta"] == 0.0
    assert iso["loss_v"]["theta"] == iso["loss_v"]["kappa"] == 0.0
    assert iso["loss_pi"]["eta"] == iso["loss_pi"]["kappa"] == 0.0
    assert iso["loss_q"]["kappa"] > 0 and iso["loss_v"]["eta"] > 0 and iso["loss_pi"]["theta"] > 0


def test_gaussian_head_isolation_and_pathwise_gradient():
    rng = np.random.default_rng(13)
    pol, g = small_policy(rng, 2, 2, head_type="gaussian", n_actions=2)
    critics = CriticSet(4, pol.config.obs_dim, 2, rng, hidden=8, action_kind="gaussian")
    adj = np.broadcast_to(g.adjacency(), (5, 4, 4)).copy()
    b = Batch(rng.normal(size=(5, 4, 3)), rng.normal(size=(5, 4, 2)), rng.normal(size=(5, 4)),
              rng.normal(size=(5, 4, 3)), adj, adj.copy(), np.arange(5))
    iso = gradient_isolation(pol, critics, b)
    assert iso["loss_pi"]["kappa"] == 0.0 and iso["loss_pi"]["theta"] > 0
    assert iso["loss_q"]["theta"] == 0.0 and iso["loss_v"]["theta"] == 0.0


def test_targets_never_on_tape():
    pol, critics, b = sac_fixture(np.random.default_rng(14))
    targets = list(critics.value_target.values())
    for fn in (lambda: loss_q(b, critics, pol), lambda: loss_v(b, critics, pol, np.random.default_rng(0)),
               lambda: loss_pi(b, critics, pol, np.random.default_rng(0))):
        with Tape() as tape:
            fn()
        for node in tape.nodes:
            for parent in node.parents:
                assert not any(np.shares_memory(parent.data, t) for t in targets)


def test_polyak_updates():
    _, critics, _ = sac_fixture(np.random.default_rng(0))
    for p in critics.value:
        p.data[...] = 1.0
    for k in critics.value_target:
        critics.value_target[k][...] = 0.0
    soft_update_targets(critics, 0.01)
    for t in critics.value_target.values():
        np.testing.assert_allclose(t, 0.01, atol=1e-17)
    for k in critics.value_target:
        critics.value_target[k][...] = 0.0
    soft_update_targets(critics, 0.5)
    soft_update_targets(critics, 0.5)
    for t in critics.value_target.values():
        np.testing.assert_array_equal(t, 0.75)
    soft_update_targets(critics, 1.0)
    for k, t in critics.value_target.items():
        np.testing.assert_array_equal(t, critics.value[k].data)
    with pytest.raises(ValueError):
        soft_update_targets(critics, 0.0)


def test_vq_decomposition_within_three_sigma():
    rng = np.random.default_rng(15)
    pol, _ = small_policy(rng, 1, 2, n_actions=2)
    critics = CriticSet(2, pol.config.obs_dim, 2, rng, hidden=8)
    exact, mc, se = vq_decomposition(pol, critics, rng.normal(size=(2, 3)),
                                     build_grid(1, 2).adjacency(), rng)
    assert abs(exact - mc) <= 3 * se


# -- training loop ----------------------------------------------------------


class Bandit(NetworkedEnv):
    """Single agent, single action, reward 1 every step."""

    n_agents, n_actions, obs_dim = 1, 1, 1

    def __init__(self, episode_length=10, seed=None, fault_at=None):
        super().__init__(seed)
        self.episode_length = episode_length
        self.fault_at = fault_at
        self._g = Graph(1, ())
        self.calls = 0

    def graph(self):
        return self._g

    def _reset(self):
        pass

    def _step(self, a):
        self.calls += 1
        if self.fault_at is not None and self.calls >= self.fault_at:
            raise EnvironmentFault("injected")
        return np.ones(1)

    def _observe(self):
        return np.ones((1, 1))


def bandit_trainer(tmp_path=None, total=2000, fault_at=None, seed=0):
    rng = np.random.default_rng(seed)
    pol = VPPPolicy(PolicyConfig(1, 1, 1, rounds=0, embed_dim=4, hidden=8), rng)
    critics = CriticSet(1, pol.config.obs_dim, 1, rng, hidden=16, gamma=0.0)
    settings = TrainSettings(total_steps=total, batch_size=16, warmup_steps=16, lr=0.01)
    env = Bandit(fault_at=fault_at, seed=seed)
    return Trainer(env, pol, critics, settings, seed=seed,
                   checkpoint_dir=None if tmp_path is None else tmp_path / "ck")


def test_single_agent_q_converges_to_reward():
    tr = bandit_trainer(total=2000)
    list(tr.run())
    assert tr.updates <= 2000
    feats = tr.critics.features(tr.policy, np.ones((1, 1, 1)), np.zeros((1, 1), bool))
    q = tr.critics.q(feats, tr.critics.encode_actions(np.zeros((1, 1), np.int64),
                                                      np.zeros((1, 1), bool))).data
    assert abs(q.item() - 1.0) < 1e-3


def test_training_is_deterministic():
    def rows(seed):
        rng = np.random.default_rng(seed)
        pol, g = small_policy(rng, 2, 2, n_actions=2, obs_dim=1)
        from vpp.envs import ConsensusGrid
        env = ConsensusGrid(2, 2, episode_length=5, seed=seed)
        critics = CriticSet(4, pol.config.obs_dim, 2, rng, hidden=8)
        tr = Trainer(env, pol, critics, TrainSettings(total_steps=60, batch_size=8, warmup_steps=8),
                     seed=seed)
        return [{k: v for k, v in r.items() if k != "wallclock_s"} for r in tr.run()]
    a, b = rows(3), rows(3)
    assert len(a) == 12
    assert str(a) == str(b)


def test_environment_fault_aborts_with_checkpoint(tmp_path):
    tr = bandit_trainer(tmp_path, total=100, fault_at=40)
    with pytest.raises(TrainingAborted) as err:
        list(tr.run())
    assert err.value.checkpoint == tmp_path / "ck" / "fault"
    assert (tmp_path / "ck" / "fault" / "policy.json").exists()
    assert (tmp_path / "ck" / "fault" / "qvalue.bin").exists()


def test_target_reward_stops_early():
    tr = bandit_trainer(total=10_000)
    tr.settings.target_reward = 0.5
    rows = list(tr.run())
    assert len(rows) == tr.settings.target_window
