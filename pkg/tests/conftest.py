"""Shared fixtures: hand-built toy traces and small networks."""

from __future__ import annotations

import numpy as np
import pytest

from collabmds.features import BsmFeaturizer, encode_trace
from collabmds.nn import NetworkSpec
from collabmds.trace import AttackType, BsmRecord


def make_record(t=0.0, sender="v0", pseudo=None, pos=(0, 0, 0), spd=(0, 0, 0), acl=(0, 0, 0),
                hed=(1, 0, 0), label=0, attack=AttackType.Genuine) -> BsmRecord:
    return BsmRecord(t + 0.01, t, sender, pseudo or sender, pos, spd, acl, hed, label, attack)


def toy_trace(n_vehicles=10, n_bad=3, per_vehicle=10, seed=0) -> list[BsmRecord]:
    """``n_vehicles`` beaconing once a second; the first ``n_bad`` sit far away.

    Separable on the position norm alone: genuine vehicles stay within 100 m
    of the origin, misbehaving ones report positions around 5 km.
    """
    rng = np.random.default_rng(seed)
    recs = []
    for t in range(per_vehicle):
        for v in range(n_vehicles):
            bad = v < n_bad
            base = 5000.0 if bad else 50.0
            pos = (base + rng.uniform(-20, 20), rng.uniform(-20, 20), 0.0)
            spd = (10.0 + rng.uniform(-1, 1), 0.0, 0.0)
            recs.append(make_record(t + 0.001 * v, f"v{v}", pos=pos, spd=spd, label=int(bad),
                                    attack=AttackType.RandomPosition if bad else AttackType.Genuine))
    return recs


@pytest.fixture
def toy_records():
    return toy_trace()


@pytest.fixture
def small_spec():
    return NetworkSpec(window=3, n_features=4, hidden=5, dense=(4,))


@pytest.fixture
def toy_encoded(toy_records):
    fz = BsmFeaturizer().fit(toy_records)
    return fz, encode_trace(fz, toy_records, 3)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
