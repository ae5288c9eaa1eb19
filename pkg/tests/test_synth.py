from collections import Counter, defaultdict

import numpy as np
import pytest

from collabmds.synth import GenConfig, InfeasibleConfigError, generate, generate_with_truth, replay_pool
from collabmds.trace import AttackType, check_labels
from conftest import make_record


def _gen(attack, **kw):
    kw.setdefault("n_vehicles", 10)
    kw.setdefault("duration", 20)
    return generate_with_truth(GenConfig(attack_types=(attack,), rng_seed=kw.pop("seed", 0), **kw))


def _by_vehicle(records, label=None):
    out = defaultdict(list)
    for r in records:
        if label is None or r.label == label:
            out[r.true_sender_id].append(r)
    return out


def test_misbehaving_vehicle_count():
    cfg = GenConfig(n_vehicles=10, misbehaving_fraction=0.3)
    assert cfg.n_misbehaving == 3
    res = generate_with_truth(cfg)
    assert Counter(a is not AttackType.Genuine for a in res.vehicle_attack.values())[True] == 3


def test_constant_position_is_fixed_per_vehicle():
    res = _gen(AttackType.ConstantPosition)
    for msgs in _by_vehicle(res.records, label=1).values():
        assert len({m.pos for m in msgs}) == 1


def test_dos_sends_ten_times_as_often():
    res = _gen(AttackType.DoS, n_vehicles=2, misbehaving_fraction=0.5, duration=60)
    counts = Counter(r.label for r in res.records)
    assert counts[1] == 600 and counts[0] == 60


def test_sybil_changes_pseudonym_every_message():
    res = _gen(AttackType.DoSRandomSybil)
    for msgs in _by_vehicle(res.records, label=1).values():
        msgs.sort(key=lambda r: r.send_time)
        assert all(a.pseudo_id != b.pseudo_id for a, b in zip(msgs, msgs[1:]))


@pytest.mark.parametrize("attack", [t for t in AttackType if t is not AttackType.Genuine])
def test_labels_agree_with_ground_truth(attack):
    res = _gen(attack)
    check_labels(res.records)
    for r, truth in zip(res.records, res.truth):
        sent = np.array([r.pos, r.spd, r.acl, r.hed])
        if r.label == 0 or attack is AttackType.DoS:
            # plain DoS is a frequency attack: the content is truthful
            np.testing.assert_array_equal(sent, truth)
        else:
            assert np.abs(sent - truth).max() > 1e-6


def test_offsets():
    const = _gen(AttackType.ConstantPositionOffset)
    for r, truth in zip(const.records, const.truth):
        if r.label:
            np.testing.assert_allclose(np.array(r.pos) - truth[0], (50, 50, 0), atol=1e-5)
    rand = _gen(AttackType.RandomPositionOffset)
    diffs = np.array([np.array(r.pos) - t[0] for r, t in zip(rand.records, rand.truth) if r.label])
    assert np.abs(diffs).max() <= 100 + 1e-5
    assert np.all(np.abs(diffs[:, :2]).min(axis=1) > 0)
    assert len({tuple(d) for d in np.round(diffs, 3)}) > len(diffs) // 2


def test_generation_is_deterministic():
    cfg = GenConfig(n_vehicles=8, duration=10, attack_types=(AttackType.Disruptive, AttackType.DoSRandom))
    assert generate(cfg) == generate(cfg)


def test_records_sorted_by_reception():
    recs = generate(GenConfig(n_vehicles=12, duration=10, presence=(0.5, 1.0)))
    times = [r.recv_time for r in recs]
    assert times == sorted(times)


def test_replay_pool_singleton_keeps_kinematics():
    src = make_record(1.0, "g", pos=(1, 2, 3), spd=(4, 5, 6))
    rng = np.random.default_rng(0)
    out = replay_pool([src], rng, send_time=5.0, recv_time=5.01, sender_id="x", pseudo_id="x-p0")
    assert (out.pos, out.spd, out.send_time, out.label) == (src.pos, src.spd, 5.0, 1)


def test_replay_pool_is_uniform():
    pool = [make_record(float(i), "g", pos=(i, 0, 0)) for i in range(4)]
    rng = np.random.default_rng(1)
    draws = Counter(replay_pool(pool, rng, send_time=10.0 + k, recv_time=10.0 + k, sender_id="x",
                                pseudo_id="x").pos[0] for k in range(1000))
    assert all(abs(draws[float(i)] - 250) <= 60 for i in range(4))


def test_replay_pool_empty():
    with pytest.raises(ValueError):
        replay_pool([], np.random.default_rng(0), send_time=0, recv_time=0, sender_id="x", pseudo_id="x")


def test_disruptive_replays_earlier_genuine_messages():
    res = _gen(AttackType.Disruptive)
    genuine = {(r.pos, r.spd): r.send_time for r in res.records if r.label == 0}
    replayed = [r for r in res.records if r.label == 1]
    assert replayed
    times = [r.recv_time for r in sorted(replayed, key=lambda r: r.recv_time)]
    assert all(b > a for a, b in zip(times, times[1:]))
    for r in replayed:
        assert genuine[(r.pos, r.spd)] < r.send_time


@pytest.mark.parametrize("kw", [
    dict(misbehaving_fraction=0.0), dict(dos_period=2.0), dict(n_vehicles=1),
    dict(area=(5.0, 5.0)), dict(attack_types=(AttackType.Genuine,)),
])
def test_infeasible_configs(kw):
    with pytest.raises(InfeasibleConfigError):
        GenConfig(**kw)
