import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from collabmds.agent import AgentConfig, Batch, DQNAgent, RewardConfig
from collabmds.features import BsmFeaturizer, encode_trace
from collabmds.nn import NetworkParams, NetworkSpec
from collabmds.transfer import (
    SourceData, SourcePolicy, TransferConfig, TrustReport, collect_source_samples, experience_selection,
    min_max_scale, probe_return, rank_sources, sample_allocation, selection_mask, train_target,
    transfer_run_csv, trust_shares,
)
from conftest import toy_trace

R = RewardConfig()
SPEC = NetworkSpec(window=3, n_features=4, hidden=4, dense=())


def _oracle_params(sign=1.0):
    """Flags a message iff its standardized position norm is positive.

    Forget gates are shut so the cell only holds the newest message; the
    candidate follows the position feature and Q(s, 1) follows the cell.
    With ``sign=-1`` the policy is exactly wrong on the toy trace.
    """
    p = NetworkParams.zeros(SPEC)
    v = p.views()
    h = SPEC.hidden
    v["lstm_b"][0:h] = 20.0  # input gate
    v["lstm_b"][h:2 * h] = -20.0  # forget gate
    v["lstm_b"][2 * h:3 * h] = 20.0  # output gate
    v["lstm_w"][0, 3 * h] = 3.0  # pos feature -> candidate of unit 0
    v["out_w"][0, 1] = 5.0 * sign
    return p


def _const_params(action):
    p = NetworkParams.zeros(SPEC)
    p.views()["out_b"][:] = [1.0, 0.0] if action == 0 else [0.0, 1.0]
    return p


@pytest.fixture(scope="module")
def toy():
    recs = toy_trace()
    return recs, BsmFeaturizer().fit(recs)


def _policy(fz, params, name="s"):
    return SourcePolicy(name, params, fz)


def test_min_max_examples():
    np.testing.assert_allclose(min_max_scale([2, 5, 8]), [0, 0.5, 1.0])
    np.testing.assert_array_equal(min_max_scale([3.0]), [1.0])
    np.testing.assert_array_equal(min_max_scale([4.0, 4.0]), [1.0, 1.0])


def test_threshold_selection():
    rep = rank_sources({"a": 0.9, "b": 0.6, "c": 0.4, "lo": 0.0, "hi": 1.0}, 0.5)
    assert {e.name for e in rep.selected} == {"a", "b", "hi"}
    assert [e.name for e in rep.ranked()] == ["hi", "a", "b", "c", "lo"]
    assert TrustReport.from_dict(rep.to_dict()).to_dict() == rep.to_dict()


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8), st.floats(0, 1), st.floats(0, 1))
def test_ranking_properties(returns, t1, t2):
    lo, hi = sorted((t1, t2))
    a, b = rank_sources(returns, lo), rank_sources(returns, hi)
    assert sorted(e.rank for e in a.entries) == list(range(1, len(returns) + 1))
    assert all(0 <= e.scaled <= 1 for e in a.entries)
    assert {e.name for e in b.selected} <= {e.name for e in a.selected}
    assert all(e.selected == (e.scaled >= lo) for e in a.entries)


def test_allocation_examples():
    np.testing.assert_allclose(trust_shares([0.9, 0.6, 0.5]), [0.45, 0.30, 0.25])
    assert sample_allocation([0.9, 0.6, 0.5], 2000).tolist() == [900, 600, 500]
    assert sample_allocation([0.7], 123).tolist() == [123]
    assert sample_allocation([1.0, 1.0], 1001).tolist() == [501, 500]
    with pytest.raises(ValueError):
        sample_allocation([0.0, 0.0], 10)


@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=10), st.integers(0, 100_000))
def test_allocation_is_exact(trusts, size):
    eta = trust_shares(trusts)
    counts = sample_allocation(trusts, size)
    assert abs(eta.sum() - 1) <= 1e-12
    assert counts.sum() == size and counts.min() >= 0
    assert np.all(np.abs(counts - eta * size) < 1)


def test_probe_return_bookkeeping(toy):
    recs, fz = toy
    assert probe_return(_policy(fz, _oracle_params()), recs, 2, R) == 2 * (30 * R.a + 70 * R.b)
    assert probe_return(_policy(fz, _oracle_params(-1)), recs, 2, R) == 2 * (-30 * R.d - 70 * R.c)
    assert probe_return(_policy(fz, _const_params(0)), recs, 3, R) == 3 * (70 * R.b - 30 * R.d)
    rets = {"oracle": probe_return(_policy(fz, _oracle_params()), recs, 2, R),
            "zero": probe_return(_policy(fz, _const_params(0)), recs, 2, R),
            "wrong": probe_return(_policy(fz, _oracle_params(-1)), recs, 2, R)}
    assert rank_sources(rets, 0.8).ranked()[-1].name == "wrong"


def test_probe_rejects_dimension_mismatch(toy):
    recs, _ = toy
    fz1 = BsmFeaturizer(("pos",)).fit(recs)
    with pytest.raises(ValueError):
        probe_return(_policy(fz1, _oracle_params()), recs, 1, R)


def test_collect_samples(toy):
    recs, fz = toy
    rng = np.random.default_rng(0)
    assert collect_source_samples(_policy(fz, _oracle_params()), recs, 0, R, fz, rng).batch is None
    got = collect_source_samples(_policy(fz, _oracle_params()), recs, 60, R, fz, rng)
    assert len(got.batch) == 60 and got.shortfall == 0
    assert set(got.batch.reward) <= {R.a, R.b}
    short = collect_source_samples(_policy(fz, _oracle_params()), recs, 150, R, fz, rng)
    assert len(short.batch) == 100 and short.shortfall == 50


def test_rewards_recomputed_with_target_constants(toy):
    recs, fz = toy
    target_r = RewardConfig(a=2.0, b=1.0, c=0.25, d=3.0)
    got = collect_source_samples(_policy(fz, _const_params(1)), recs, 100, target_r, fz,
                                 np.random.default_rng(0))
    assert sorted(set(got.batch.reward)) == [-0.25, 2.0]


def test_collected_states_use_target_features(toy):
    recs, fz = toy
    fz_t = BsmFeaturizer(("pos",)).fit(recs)
    got = collect_source_samples(_policy(fz, _oracle_params()), recs, 10, R, fz_t, np.random.default_rng(0),
                                 window=3)
    assert got.batch.seq.shape == (10, 3, 1)


def _terminal_batch(spec, rewards):
    n = len(rewards)
    z = np.zeros((n, spec.window, spec.n_features))
    za = np.zeros((n, spec.window))
    return Batch(z, za, np.zeros(n, dtype=np.intp), np.array(rewards, dtype=float), z, za, np.ones(n, bool))


def test_selection_examples():
    p = NetworkParams.zeros(SPEC)
    kept, dropped = experience_selection(p, p, 0.995, _terminal_batch(SPEC, [R.a, -R.c, 0.0]))
    assert kept.tolist() == [1, 2] and dropped.tolist() == [0]
    np.testing.assert_array_equal(selection_mask(np.array([1.0, 1.0]), np.array([1.0, 2.0])), [True, False])
    np.testing.assert_array_equal(selection_mask(np.array([1.0, 1.0]), np.array([1.0, 2.0]), "y-gt-q"),
                                  [False, True])
    with pytest.raises(ValueError):
        selection_mask(np.zeros(1), np.zeros(1), "nope")


def _target_run(recs, fz_src, sources, cfg, episodes=4, seed=3):
    fz = BsmFeaturizer().fit(recs)
    agent = DQNAgent(SPEC, AgentConfig(batch_size=8), seed=seed)
    tr = encode_trace(fz, recs, 3)
    return agent, train_target(agent, tr, sources, cfg, episodes, fz)


def test_no_sources_reproduces_baseline(toy):
    recs, fz = toy
    base = DQNAgent(SPEC, AgentConfig(batch_size=8), seed=3)
    stats = base.train(encode_trace(BsmFeaturizer().fit(recs), recs, 3), 4)
    agent, res = _target_run(recs, fz, [], TransferConfig(buffer_size=200, seed=9))
    assert [s.row() for s in res.stats] == [s.row() for s in stats]
    np.testing.assert_array_equal(agent.params.flat, base.params.flat)
    assert res.log.minibatches == 0


def test_transfer_invariants(toy):
    recs, fz = toy
    sources = [SourceData(_policy(fz, _oracle_params(), "good"), recs, 1.0),
               SourceData(_policy(fz, _const_params(1), "meh"), recs, 0.5)]
    cfg = TransferConfig(buffer_size=120, selection_fraction=0.5, seed=1)
    agent, res = _target_run(recs, fz, sources, cfg, episodes=4)
    log = res.log
    assert log.minibatches > 0 and log.violations == 0
    # a slot drawn twice in one minibatch is removed once
    assert log.trained <= log.drawn and 0 < log.removed <= log.drawn - log.trained
    assert set(res.collected) == {"good", "meh"}
    assert res.collected["good"] >= res.collected["meh"]
    assert [s.phase for s in res.stats] == ["selection", "selection", "plain-dqn", "plain-dqn"]
    lines = transfer_run_csv(res.stats).strip().split("\n")
    assert lines[0].startswith("episode,phase,") and lines[1].split(",")[1] == "selection"


def test_sampler_buffer_stays_bounded(toy):
    recs, fz = toy
    sources = [SourceData(_policy(fz, _oracle_params(), "good"), recs, 1.0)]
    seen = []
    cfg = TransferConfig(buffer_size=50, selection_fraction=1.0, seed=2)
    fz_t = BsmFeaturizer().fit(recs)
    agent = DQNAgent(SPEC, AgentConfig(batch_size=8), seed=0)
    tr = encode_trace(fz_t, recs, 3)
    res = train_target(agent, tr, sources, cfg, 2, fz_t,
                       callback=lambda s: seen.append(s))
    assert len(seen) == 2 and res.log.drawn > 0
    assert res.shortfalls == {}


def test_transfer_config_validation():
    for kw in (dict(probe_episodes=0), dict(t_th=1.5), dict(buffer_size=0), dict(selection_rule="x"),
               dict(own_fraction=2.0)):
        with pytest.raises(ValueError):
            TransferConfig(**kw)
    assert TransferConfig(selection_fraction=0.4).selection_episodes(20) == 8
