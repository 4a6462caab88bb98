import math

import numpy as np
import pytest

from oracles import brute_force_allocation
from xrstream.agents import (ConstantPolicy, DqnAgent, DqnHyperparams, GreedyOracle, History,
                             OracleContext, ReplayMemory, SimpleBaseline, Transition, act,
                             baseline_fc_dqn_act, baseline_simple_act, check_observation,
                             greedy_oracle_act, push, td_targets, train_step)
from xrstream.allocator import LyapunovParams, VirtualQueue
from xrstream.channel import ChannelSample
from xrstream.neural import MLPQNetwork
from xrstream.qoe import BitrateLadder, QoEWeights

LADDER = BitrateLadder()
W = QoEWeights(0.1, 1.0)
LP = LyapunovParams(beta=1.0, e_budget=0.03, delta_t=1 / 60, power_w=0.2)
R20 = 180e3 * math.log2(101)
SMALL_HP = DqnHyperparams(batch_size=4, replay_capacity=64, warmup_transitions=8,
                          hidden=4, fc=8, fc_widths=(4, 8), dtype="float64")


def zero_net(agent):
    for p in agent.net.params().values():
        p[...] = 0
    return agent


def test_history_cold_start():
    h = History(LADDER, 4)
    obs = h.observation()
    assert obs.shape == (4, 2)
    assert np.all(obs[:, 0] == 1 / 20) and np.all(obs[:, 1] == 0)
    h.push(20, 1, -1.0)
    obs = h.observation()
    assert obs[-1].tolist() == [1.0, 1.0]
    assert obs[0].tolist() == [0.05, 0.0]
    assert (h.last_level, h.last_x, h.last_q) == (20, 1, -1.0)
    check_observation(obs, 4)
    with pytest.raises(ValueError):
        check_observation(obs, 5)
    with pytest.raises(ValueError):
        check_observation(np.array([[0.0, 0.0]] * 4), 4)


def test_dqn_zero_network_picks_lowest_level():
    agent = zero_net(DqnAgent("lstm-dqn", LADDER, 3, SMALL_HP))
    assert act(agent, History(LADDER, 3)) == 1


def test_dqn_bias_selects_action():
    agent = zero_net(DqnAgent("lstm-dqn", LADDER, 3, SMALL_HP))
    agent.net.fc2.b[6] = 1.0
    agent.training, agent.epsilon = True, 0.0
    assert act(agent, History(LADDER, 3)) == 7


def test_epsilon_one_is_uniform():
    agent = DqnAgent("lstm-dqn", LADDER, 2, SMALL_HP, rng=np.random.default_rng(42))
    agent.training, agent.epsilon = True, 1.0
    h = History(LADDER, 2)
    n = 10_000
    counts = np.bincount([act(agent, h) for _ in range(n)], minlength=21)[1:]
    p = 1 / 20
    sigma = math.sqrt(n * p * (1 - p))
    assert counts.sum() == n
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_epsilon_schedule():
    agent = DqnAgent("lstm-dqn", LADDER, 2, DqnHyperparams(decay_frames=100, hidden=4, fc=4))
    assert agent.epsilon_at(0) == 1.0
    assert agent.epsilon_at(50) == pytest.approx(0.51)
    assert agent.epsilon_at(100) == 0.02
    assert agent.epsilon_at(10_000) == 0.02


def test_greedy_eval_is_deterministic():
    rng = np.random.default_rng(0)
    agent = DqnAgent("lstm-dqn", LADDER, 3, SMALL_HP, rng=rng)
    h = History(LADDER, 3)
    for lvl, x in [(5, 0), (9, 1), (2, 0)]:
        h.push(lvl, x, 0.0)
    first = act(agent, h)
    assert all(act(agent, h) == first for _ in range(20))


def test_simple_baseline():
    assert baseline_simple_act(5, 0, 20) == 6
    assert baseline_simple_act(1, 1, 20) == 1
    assert baseline_simple_act(20, 0, 20) == 20
    assert baseline_simple_act(7, 1, 20) == 6
    pol = SimpleBaseline(LADDER)
    h = History(LADDER, 1)
    assert act(pol, h) == 2


def test_oracle_context_only_for_greedy():
    ctx = OracleContext(None, ChannelSample(0, 1.0, R20, 10), VirtualQueue(0))
    with pytest.raises(ValueError):
        act(SimpleBaseline(LADDER), History(LADDER, 1), ctx)
    with pytest.raises(ValueError):
        act(GreedyOracle(LADDER, W, LP), History(LADDER, 1))


def test_greedy_examples():
    s = ChannelSample(0, 1.0, R20, 50)
    assert greedy_oracle_act(20 / 60, s, VirtualQueue(0), W, LP, LADDER) == 20
    s0 = ChannelSample(0, 1.0, R20, 0)
    assert greedy_oracle_act(5 / 60, s0, VirtualQueue(3.0), W, LP, LADDER) == 20
    s10 = ChannelSample(0, 1.0, R20, 10)
    assert greedy_oracle_act(11 / 60, s10, VirtualQueue(0), W, LP, LADDER) == 11


def brute_force_greedy(v_prev, r, n_max, Q):
    """Minimum over every (level, n) pair; ties to the higher level."""
    best, best_level = math.inf, None
    for m in range(20, 0, -1):
        v_bits = m / 60 * 1e6
        score, _, _ = brute_force_allocation(v_bits, v_prev, r, n_max, Q, 0.1, 1.0, 1.0, 0.2, 1 / 60)
        if score < best - 1e-12 * max(1.0, abs(best)):
            best, best_level = score, m
    return best, best_level


def test_greedy_agrees_with_full_brute_force():
    rng = np.random.default_rng(17)
    for _ in range(2000):
        r = 180e3 * math.log2(1 + 100 * rng.exponential())
        n_max = int(rng.integers(0, 21))
        Q = float(rng.choice([0.0, rng.uniform(0, 10), rng.uniform(0, 200)]))
        v_prev = float(rng.integers(1, 21)) / 60
        level = greedy_oracle_act(v_prev, ChannelSample(0, 1.0, r, n_max), VirtualQueue(Q),
                                  W, LP, LADDER)
        best, _ = brute_force_greedy(v_prev, r, n_max, Q)
        chosen, _, _ = brute_force_allocation(level / 60 * 1e6, v_prev, r, n_max, Q,
                                              0.1, 1.0, 1.0, 0.2, 1 / 60)
        assert 1 <= level <= 20
        assert chosen <= best + 1e-12 * max(1.0, abs(best))


def test_fc_dqn_act():
    net = MLPQNetwork(2, 20, widths=(4, 4))
    for p in net.params().values():
        p[...] = 0
    assert baseline_fc_dqn_act([0.05, 0.0167], net) == 1
    net.params()["fc3.b"][2] = 0.5
    assert baseline_fc_dqn_act([0.05, 0.0167], net) == 3
    with pytest.raises(ValueError):
        baseline_fc_dqn_act([0.1, 0.2, 0.3], net)


def test_fc_dqn_state_encoding():
    agent = DqnAgent("fc-dqn", LADDER, 10, SMALL_HP)
    h = History(LADDER, 10)
    assert agent.encode(h).tolist() == [0.05, 1 / 60]
    h.push(8, 1, -1.0)
    assert agent.encode(h).tolist() == [0.4, -1.0]


def test_replay_memory_ring():
    mem = ReplayMemory(2, (1,))
    for k in (1, 2, 3):
        push(mem, Transition(np.array([float(k)]), k, float(k), np.array([float(k)])))
        assert len(mem) <= 2
    assert [t.action for t in mem.items()] == [2, 3]


def test_replay_sampling_uniform():
    n = 8
    mem = ReplayMemory(n, (1,))
    for k in range(n):
        mem.push(Transition(np.array([float(k)]), 1, 0.0, np.array([0.0])))
    rng = np.random.default_rng(5)
    draws = 40_000
    idx = np.concatenate([mem.sample_indices(64, rng) for _ in range(draws // 64)])
    counts = np.bincount(idx, minlength=n)
    p = 1 / n
    sigma = math.sqrt(len(idx) * p * (1 - p))
    assert np.all(np.abs(counts - len(idx) * p) <= 3 * sigma)


def test_td_targets():
    y = td_targets(np.array([0.05]), np.array([[0.1, 0.5, -0.3]]), 0.95)
    assert y[0] == pytest.approx(0.525)


def fill(agent, n, rng):
    h = History(agent.ladder, agent.window)
    for _ in range(n):
        s = agent.encode(h)
        a = int(rng.integers(1, 21))
        x = int(rng.integers(0, 2))
        q = -1.0 if x else a / 60
        h.push(a, x, q)
        agent.remember(s, a, q, agent.encode(h))


def test_train_step_loss_is_minibatch_mse():
    agent = DqnAgent("lstm-dqn", LADDER, 2, SMALL_HP, rng=np.random.default_rng(0))
    zero_net(agent)
    agent.target = agent.net.copy()
    mem = ReplayMemory(8, (2, 2))
    obs = np.full((2, 2), 0.5)
    # Zero network: Q = 0 everywhere so y = r and the loss is the mean of r^2.
    for r in (1.0, 0.0) * 4:
        mem.push(Transition(obs, 3, r, obs))
    hp = DqnHyperparams(batch_size=2, replay_capacity=8, warmup_transitions=2, hidden=4, fc=8,
                        learning_rate=0.0)
    agent.rng = np.random.default_rng(1)
    idx = mem.sample_indices(2, np.random.default_rng(1))
    expected = float(np.mean(mem.rewards[idx] ** 2))
    loss = train_step(agent, mem, hp)
    assert loss == pytest.approx(expected)
    # batch {1, 0} against Q = {0, 0}
    assert 0.5 == pytest.approx(np.mean(np.array([1.0, 0.0]) ** 2))


def test_train_step_zero_lr_keeps_params():
    rng = np.random.default_rng(3)
    hp = DqnHyperparams(batch_size=4, replay_capacity=64, warmup_transitions=8, hidden=4, fc=8,
                        learning_rate=0.0, dtype="float64")
    agent = DqnAgent("lstm-dqn", LADDER, 3, hp, rng=rng)
    fill(agent, 16, rng)
    before = {k: v.copy() for k, v in agent.net.params().items()}
    loss = train_step(agent)
    assert math.isfinite(loss)
    assert all(np.array_equal(before[k], v) for k, v in agent.net.params().items())


def test_train_step_requires_warm_memory():
    rng = np.random.default_rng(4)
    agent = DqnAgent("lstm-dqn", LADDER, 3, SMALL_HP, rng=rng)
    fill(agent, 5, rng)
    with pytest.raises(ValueError):
        train_step(agent)


def test_train_step_syncs_target_periodically():
    rng = np.random.default_rng(6)
    hp = DqnHyperparams(batch_size=4, replay_capacity=64, warmup_transitions=8, hidden=4, fc=8,
                        learning_rate=1e-2, target_sync_period=3, dtype="float64")
    agent = DqnAgent("fc-dqn", LADDER, 3, hp, rng=rng)
    fill(agent, 20, rng)
    train_step(agent)
    train_step(agent)
    assert any(not np.array_equal(agent.net.params()[k], v)
               for k, v in agent.target.params().items())
    train_step(agent)
    assert all(np.array_equal(agent.net.params()[k], v) for k, v in agent.target.params().items())


def test_train_step_reduces_loss_on_fixed_batch():
    rng = np.random.default_rng(7)
    hp = DqnHyperparams(batch_size=16, replay_capacity=16, warmup_transitions=16, hidden=8,
                        fc=16, learning_rate=1e-2, gamma=0.0, dtype="float64")
    agent = DqnAgent("lstm-dqn", LADDER, 2, hp, rng=rng)
    fill(agent, 16, rng)
    losses = [train_step(agent) for _ in range(300)]
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])


def test_every_policy_returns_valid_levels():
    rng = np.random.default_rng(8)
    policies = [ConstantPolicy(LADDER, 20), SimpleBaseline(LADDER), GreedyOracle(LADDER, W, LP),
                DqnAgent("lstm-dqn", LADDER, 3, SMALL_HP, rng=rng),
                DqnAgent("fc-dqn", LADDER, 3, SMALL_HP, rng=rng)]
    h = History(LADDER, 3)
    for k in range(200):
        sample = ChannelSample(k, 1.0, float(rng.uniform(0, 3e6)), int(rng.integers(0, 15)))
        for pol in policies:
            ctx = OracleContext(None, sample, VirtualQueue(float(rng.uniform(0, 50)))) \
                if pol.needs_oracle else None
            lvl = act(pol, h, ctx)
            assert 1 <= lvl <= 20
        h.push(int(rng.integers(1, 21)), int(rng.integers(0, 2)), 0.0)


def test_checkpoint_roundtrip_agent():
    agent = DqnAgent("lstm-dqn", LADDER, 3, SMALL_HP, seed=4)
    back = DqnAgent.from_checkpoint(agent.checkpoint())
    h = History(LADDER, 3)
    h.push(4, 0, 0.1)
    assert np.array_equal(back.net.q_values(h.observation()), agent.net.q_values(h.observation()))
    assert back.hp == agent.hp
    with pytest.raises(ValueError):
        DqnAgent.from_checkpoint(agent.checkpoint(), BitrateLadder([1, 2, 3]))
