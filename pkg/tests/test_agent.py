import numpy as np
import pytest

from collabmds.agent import (
    AgentConfig, Batch, DQNAgent, Experience, ReplayBuffer, RewardConfig, episodes_csv, evaluate,
    greedy_pass, reward, select_action, td_target,
)
from collabmds.features import BsmFeaturizer, encode_trace
from collabmds.nn import NetworkParams, NetworkSpec, forward
from conftest import toy_trace

R = RewardConfig()


def test_reward_table():
    assert reward(1, 1, R) == R.a
    assert reward(0, 0, R) == R.b
    assert reward(1, 0, R) == -R.c
    assert reward(0, 1, R) == -R.d and abs(-R.d) > abs(-R.c)
    inv = R.invert()
    assert reward(1, 1, inv) == -R.a and reward(0, 1, inv) == R.d
    with pytest.raises(ValueError):
        reward(2, 0, R)


@pytest.mark.parametrize("kw", [dict(a=0.5, b=0.5), dict(c=1.0, d=1.0), dict(b=0.0)])
def test_reward_constraints(kw):
    with pytest.raises(ValueError):
        RewardConfig(**kw)


@pytest.mark.parametrize("kw", [dict(gamma=1.0), dict(replay_capacity=32), dict(eps_end=2.0)])
def test_agent_config_validation(kw):
    with pytest.raises(ValueError):
        AgentConfig(**kw)


def test_epsilon_schedule():
    cfg = AgentConfig()
    assert cfg.epsilon(0, 100) == 1.0
    assert cfg.epsilon(30, 100) == pytest.approx(0.525)
    assert cfg.epsilon(60, 100) == pytest.approx(0.05)
    assert cfg.epsilon(99, 100) == pytest.approx(0.05)


def _bias_net(q0, q1):
    spec = NetworkSpec(window=1, n_features=1, hidden=1, dense=())
    p = NetworkParams.zeros(spec)
    p.views()["out_b"][:] = [q0, q1]
    return p


def test_select_action_argmax_and_tie():
    s, a = np.zeros((1, 1)), np.zeros(1)
    rng = np.random.default_rng(0)
    assert select_action(_bias_net(0.2, 0.9), s, a, 0.0, rng) == 1
    assert select_action(_bias_net(0.5, 0.5), s, a, 0.0, rng) == 0


def test_select_action_uniform_when_exploring():
    s, a = np.zeros((1, 1)), np.zeros(1)
    rng = np.random.default_rng(0)
    p = _bias_net(5.0, 0.0)
    freq = np.mean([select_action(p, s, a, 1.0, rng) for _ in range(10000)])
    assert abs(freq - 0.5) <= 0.02


def test_td_target_cases():
    p = _bias_net(2.0, 1.0)
    s, a = np.zeros((1, 1)), np.zeros(1)
    assert td_target(1.0, s, a, p, 0.9, True) == 1.0
    assert td_target(0.5, s, a, p, 0.0, False) == 0.5
    assert td_target(1.0, s, a, p, 0.5, False) == 2.0
    batch = td_target(np.array([1.0, 1.0]), np.zeros((2, 1, 1)), np.zeros((2, 1)), p, 0.5,
                      np.array([True, False]))
    np.testing.assert_array_equal(batch, [1.0, 2.0])


def _agent(spec=None, **kw):
    spec = spec or NetworkSpec(window=3, n_features=4, hidden=5, dense=(4,))
    return DQNAgent(spec, AgentConfig(**kw), seed=0)


def _one_transition(spec, r=1.0):
    rng = np.random.default_rng(0)
    seq = rng.normal(size=(1, spec.window, spec.n_features))
    acts = np.zeros((1, spec.window))
    return Batch(seq, acts, np.array([1]), np.array([r]), np.zeros_like(seq), acts.copy(), np.array([True]))


def test_train_step_at_optimum_leaves_params():
    ag = _agent()
    b = _one_transition(ag.spec)
    b.reward[:] = forward(ag.params, b.seq, b.acts)[0, 1]
    before = ag.params.flat.copy()
    assert ag.train_step(b) == 0.0
    np.testing.assert_array_equal(ag.params.flat, before)


def test_train_step_converges_on_fixed_transition():
    ag = _agent()
    b = _one_transition(ag.spec, r=1.0)
    for _ in range(5000):
        ag.train_step(b)
        if abs(forward(ag.params, b.seq, b.acts)[0, 1] - 1.0) < 1e-3:
            break
    assert abs(forward(ag.params, b.seq, b.acts)[0, 1] - 1.0) < 1e-3


def test_target_sync_every_T_steps():
    ag = _agent(target_sync=3)
    b = _one_transition(ag.spec)
    initial = ag.target.flat.copy()
    ag.train_step(b)
    ag.train_step(b)
    np.testing.assert_array_equal(ag.target.flat, initial)  # constant between syncs
    ag.train_step(b)
    np.testing.assert_array_equal(ag.target.flat, ag.params.flat)
    synced = ag.target.flat.copy()
    ag.train_step(b)
    np.testing.assert_array_equal(ag.target.flat, synced)
    assert not np.array_equal(ag.params.flat, synced)


def _toy(n_vehicles=10, n_bad=3, per_vehicle=10):
    recs = toy_trace(n_vehicles, n_bad, per_vehicle)
    fz = BsmFeaturizer().fit(recs)
    return encode_trace(fz, recs, 3)


def test_oracle_and_always_zero_returns():
    tr = _toy()
    ag = _agent()
    lab = tr.labels
    s = ag.run_episode(tr, 0.0, learn=False, policy=lambda seq, acts, i: lab[i])
    assert s.cumulative_reward == 30 * R.a + 70 * R.b
    assert (s.counts.fp, s.counts.fn) == (0, 0)
    s0 = ag.run_episode(tr, 0.0, learn=False, policy=lambda *_: 0)
    assert s0.cumulative_reward == 70 * R.b - 30 * R.d
    s1 = ag.run_episode(tr, 0.0, learn=False, policy=lambda *_: 1)
    assert (s1.counts.tp, s1.counts.fp) == (30, 70)


def test_random_policy_expected_return():
    tr = _toy()
    ag = _agent()
    rewards = [ag.run_episode(tr, 1.0, episode=e, learn=False).cumulative_reward for e in range(300)]
    expected = (30 * (R.a - R.d) + 70 * (R.b - R.c)) / 2
    # std of one episode is about 3.9; the mean of 300 is within 1 w.h.p.
    assert abs(np.mean(rewards) - expected) < 1.0


def test_episode_bookkeeping_and_replay():
    tr = _toy()
    ag = _agent(batch_size=8, replay_capacity=150)
    s = ag.run_episode(tr, 0.5)
    assert s.counts.total == len(tr) and len(ag.replay) == 100
    assert ag.replay.terminal.sum() == 1 and ag.replay.terminal[99]  # only the last step
    assert s.train_steps == 100 - 8 + 1
    ag.run_episode(tr, 0.5)
    assert len(ag.replay) == 150 and ag.replay.writes == 200
    rewards = set(np.round(ag.replay.reward, 10))
    assert rewards <= {R.a, R.b, -R.c, -R.d}


def test_runs_are_reproducible():
    tr = _toy()
    a, b = _agent(), _agent()
    sa, sb = a.train(tr, 3), b.train(tr, 3)
    assert [s.row() for s in sa] == [s.row() for s in sb]
    np.testing.assert_array_equal(a.params.flat, b.params.flat)


def test_agent_learns_separable_trace():
    tr = _toy()
    ag = _agent()
    ag.train(tr, 15)
    c = evaluate(ag.params, tr)
    assert c.fp + c.fn <= 5
    assert evaluate(ag.params, tr) == c  # idempotent


def test_evaluate_matches_stepwise_greedy():
    tr = _toy()
    ag = _agent()
    ag.train(tr, 2)
    gp = greedy_pass(ag.params, tr)
    s = ag.run_episode(tr, 0.0, learn=False)
    assert gp.counts(tr.labels) == s.counts


def test_empty_trace_rejected():
    ag = _agent()
    tr = _toy()
    with pytest.raises(ValueError):
        ag.train_step(_one_transition(ag.spec).subset(np.array([False])))
    assert len(tr) == 100


def test_replay_buffer_ring_and_remove():
    spec = NetworkSpec(window=1, n_features=1, hidden=1, dense=())
    buf = ReplayBuffer(4, spec)
    for k in range(6):
        buf.push(np.full((1, 1), k), np.zeros(1), 0, float(k), np.zeros((1, 1)), np.zeros(1), False)
    assert len(buf) == 4 and sorted(buf.reward) == [2.0, 3.0, 4.0, 5.0]
    assert buf.remove([0, 0, 3]) == 2
    # slots held [4, 5, 2, 3]; slots 0 and 3 go, the tail fills the hole
    assert len(buf) == 2 and sorted(buf.all().reward) == [2.0, 5.0]
    buf.push(np.zeros((1, 1)), np.zeros(1), 1, 9.0, np.zeros((1, 1)), np.zeros(1), True)
    assert sorted(buf.all().reward) == [2.0, 5.0, 9.0]


def test_experience_batch_and_csv():
    e = Experience(np.zeros((1, 1)), np.zeros(1), 1, 1.0, np.ones((1, 1)), np.ones(1), True)
    b = Batch.from_experiences([e, e])
    assert len(b) == 2 and b.terminal.all()
    tr = _toy()
    stats = _agent().train(tr, 2)
    lines = episodes_csv(stats).strip().split("\n")
    assert lines[0] == "episode,cumulative_reward,epsilon,tp,tn,fp,fn" and len(lines) == 3
