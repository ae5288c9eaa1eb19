"""Trust-ranked, selective experience transfer from source RSUs to a target.

Sources are scored by how much reward their greedy policies earn on a
held-out slice of the target's data, min-max scaled into trust values and
thresholded.  The target then trains on a buffer of transitions collected by
the trusted source policies (in proportion to trust) plus its own, keeping
only samples whose current Q estimate is at least their TD target and
deleting the rest.  After an initial phase it falls back to plain DQN.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .agent import (
    Batch,
    DQNAgent,
    EpisodeStats,
    ReplayBuffer,
    RewardConfig,
    greedy_pass,
    td_target,
)
from .features import BsmFeaturizer, EncodedTrace, encode_trace
from .nn import NetworkParams, forward
from .trace import BsmRecord

log = logging.getLogger(__name__)


@dataclass
class SourcePolicy:
    """A trained source network together with the featurizer it was trained with."""

    name: str
    params: NetworkParams
    featurizer: BsmFeaturizer
    window_key: str = "pseudo"

    def encode(self, records) -> EncodedTrace:
        return encode_trace(self.featurizer, records, self.params.spec.window, self.window_key)


@dataclass
class TransferConfig:
    probe_episodes: int = 10
    t_th: float = 0.8
    buffer_size: int = 50_000
    selection_fraction: float = 0.4
    # exploration used when rolling out source policies; None follows the
    # target's own epsilon schedule
    source_epsilon: float | None = None
    own_fraction: float = 0.25
    selection_rule: str = "q-ge-y"
    seed: int = 0

    def __post_init__(self):
        if self.probe_episodes < 1:
            raise ValueError("probe_episodes must be >= 1")
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be > 0")
        if not 0 <= self.t_th <= 1:
            raise ValueError("t_th must be in [0, 1]")
        if not 0 <= self.selection_fraction <= 1:
            raise ValueError("selection_fraction must be in [0, 1]")
        if self.selection_rule not in SELECTION_RULES:
            raise ValueError(f"selection_rule must be one of {SELECTION_RULES}")
        if not 0 <= self.own_fraction <= 1:
            raise ValueError("own_fraction must be in [0, 1]")
        if self.source_epsilon is not None and not 0 <= self.source_epsilon <= 1:
            raise ValueError("source_epsilon must be in [0, 1]")

    def selection_episodes(self, n_episodes: int) -> int:
        return int(math.floor(self.selection_fraction * n_episodes + 1e-9))

    @classmethod
    def from_dict(cls, d: dict) -> TransferConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown transfer options: {sorted(unknown)}")
        return cls(**d)


# -- trust evaluation -------------------------------------------------------


def probe_return(policy: SourcePolicy, target_records, n_episodes: int, rewards: RewardConfig) -> float:
    """Cumulative target-reward of the source's greedy policy over ``n_episodes`` passes.

    The probe never learns, and a greedy policy's decision on a message only
    depends on that message's own stream, so every pass scores the same;
    the total is ``n_episodes`` times one pass.  The target's raw records are
    re-featurized with the source's own featurizer, which is how a source
    trained on more features than the target observes is still scored.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    encoded = policy.encode(target_records)
    if encoded.windows.shape[2] != policy.params.spec.n_features:
        raise ValueError(
            f"source {policy.name} expects {policy.params.spec.n_features} features, "
            f"featurizer gives {encoded.windows.shape[2]}"
        )
    gp = greedy_pass(policy.params, encoded)
    one = float(rewards.table[gp.actions, encoded.labels].sum())
    return n_episodes * one


@dataclass
class TrustEntry:
    name: str
    raw_return: float
    scaled: float
    rank: int
    selected: bool

    @property
    def trust(self) -> float:
        return self.scaled


@dataclass
class TrustReport:
    entries: list[TrustEntry]
    t_th: float
    seeds: dict = field(default_factory=dict)

    @property
    def selected(self) -> list[TrustEntry]:
        return [e for e in self.entries if e.selected]

    def by_name(self, name: str) -> TrustEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def ranked(self) -> list[TrustEntry]:
        return sorted(self.entries, key=lambda e: e.rank)

    def to_dict(self) -> dict:
        return {
            "t_th": self.t_th,
            "seeds": self.seeds,
            "sources": [
                {"name": e.name, "raw_return": e.raw_return, "scaled": e.scaled,
                 "rank": e.rank, "selected": e.selected}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrustReport:
        entries = [TrustEntry(s["name"], s["raw_return"], s["scaled"], s["rank"], s["selected"])
                   for s in d["sources"]]
        return cls(entries, d["t_th"], d.get("seeds", {}))


def min_max_scale(values: Sequence[float]) -> np.ndarray:
    """Scale to [0, 1]; a single value or all-equal values map to 1.0."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if len(v) == 1 or hi == lo:
        return np.ones_like(v)
    return (v - lo) / (hi - lo)


def rank_sources(returns: dict[str, float] | Sequence[float], t_th: float) -> TrustReport:
    """Min-max scale probe returns into trust values, rank them and threshold."""
    if isinstance(returns, dict):
        names = list(returns)
        raw = [float(returns[k]) for k in names]
    else:
        raw = [float(g) for g in returns]
        names = [f"source{i + 1}" for i in range(len(raw))]
    if not raw:
        raise ValueError("need at least one source")
    scaled = min_max_scale(raw)
    order = sorted(range(len(raw)), key=lambda i: (-scaled[i], i))
    rank = {i: r + 1 for r, i in enumerate(order)}
    entries = [TrustEntry(names[i], raw[i], float(scaled[i]), rank[i], bool(scaled[i] >= t_th))
               for i in range(len(raw))]
    return TrustReport(entries, t_th)


def trust_shares(trusts: Sequence[float]) -> np.ndarray:
    t = np.asarray(trusts, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("trust values must be non-negative")
    total = t.sum()
    if total <= 0:
        raise ValueError("trust values sum to zero")
    return t / total


def sample_allocation(trusts: Sequence[float], size: int) -> np.ndarray:
    """Split ``size`` samples in proportion to trust, by largest remainder.

    Ties in the remainder go to the earlier source.
    """
    if size < 0:
        raise ValueError("size must be non-negative")
    eta = trust_shares(trusts)
    exact = eta * size
    counts = np.floor(exact).astype(np.int64)
    short = size - int(counts.sum())
    if short:
        rem = exact - counts
        order = sorted(range(len(rem)), key=lambda i: (-rem[i], i))
        for i in order[:short]:
            counts[i] += 1
    return counts


# -- source collection -------------------------------------------------------


@dataclass
class CollectedSamples:
    batch: Batch | None
    requested: int
    shortfall: int


def _rollout_transitions(acting: EncodedTrace, stored: EncodedTrace, actions, acts_before,
                         rewards: RewardConfig, order: np.ndarray) -> Batch:
    """Transitions along ``order`` with states in the ``stored`` encoding."""
    labels = acting.labels
    seq = stored.windows[order]
    acts = acts_before[order]
    a = actions[order].astype(np.intp)
    r = rewards.table[a, labels[order]]
    next_seq = np.zeros_like(seq)
    next_acts = np.zeros_like(acts)
    next_seq[:-1] = seq[1:]
    next_acts[:-1] = acts[1:]
    terminal = np.zeros(len(order), dtype=bool)
    terminal[-1] = True
    return Batch(seq, acts, a, r, next_seq, next_acts, terminal)


def collect_source_samples(policy: SourcePolicy, source_records, count: int, rewards: RewardConfig,
                           target_featurizer: BsmFeaturizer, rng: np.random.Generator,
                           window: int | None = None, epsilon: float = 0.0,
                           window_key: str = "pseudo") -> CollectedSamples:
    """Roll the source policy over its own data and keep ``count`` transitions.

    Actions come from the source network seeing the source's features;
    the stored states use the target's featurizer so they fit the target's
    network.  Rewards are recomputed with the target's reward constants
    against the ground-truth labels of ``source_records``.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return CollectedSamples(None, 0, 0)
    acting = policy.encode(source_records)
    stored = encode_trace(target_featurizer, acting.arrays, window or policy.params.spec.window, window_key)
    gp = greedy_pass(policy.params, acting, epsilon=epsilon, rng=rng if epsilon > 0 else None)
    if stored.window_key != acting.window_key:
        raise ValueError("source and target encodings must use the same stream keys")
    order = acting.episode_order(rng)
    all_tr = _rollout_transitions(acting, stored, gp.actions, gp.acts_before, rewards, order)
    n = len(all_tr)
    take = min(count, n)
    pick = np.sort(rng.choice(n, size=take, replace=False))
    return CollectedSamples(all_tr.subset(pick), count, count - take)


# -- experience selection ---------------------------------------------------


SELECTION_RULES = ("q-ge-y", "y-gt-q")


def selection_mask(q_sa: np.ndarray, y: np.ndarray, rule: str = "q-ge-y") -> np.ndarray:
    """Which samples survive selection.

    ``q-ge-y`` keeps Q(s,a) >= y, the test written in the training
    algorithm; ``y-gt-q`` keeps y > Q(s,a), the lower-bound relation the
    selection is derived from.
    """
    if rule == "q-ge-y":
        return q_sa >= y
    if rule == "y-gt-q":
        return y > q_sa
    raise ValueError(f"unknown selection rule {rule!r}")


def experience_selection(params: NetworkParams, target_params: NetworkParams, gamma: float,
                         batch: Batch, rule: str = "q-ge-y") -> tuple[np.ndarray, np.ndarray]:
    """Partition ``batch`` into kept/discarded index arrays (default: Q(s,a) >= y)."""
    y = td_target(batch.reward, batch.next_seq, batch.next_acts, target_params, gamma, batch.terminal)
    q = forward(params, batch.seq, batch.acts)
    q_sa = q[np.arange(len(batch)), batch.action]
    keep = selection_mask(q_sa, y, rule)
    return np.flatnonzero(keep), np.flatnonzero(~keep)


@dataclass
class SelectionLog:
    minibatches: int = 0
    drawn: int = 0
    trained: int = 0
    removed: int = 0
    violations: int = 0
    skipped: int = 0  # minibatches where nothing survived

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class SourceData:
    """A selected source: its policy, trust value and the records it collects from."""

    policy: SourcePolicy
    records: list[BsmRecord]
    trust: float


class SelectiveSampler:
    """Draws minibatches from the transfer buffer and prunes what fails selection.

    Before every draw the agent's newest own transitions are appended, so
    the buffer always carries on-policy target samples alongside whatever
    the episode-start refill brought in.
    """

    def __init__(self, buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator, log: SelectionLog,
                 rule: str = "q-ge-y"):
        self.rule = rule
        self.buffer = buffer
        self.batch_size = batch_size
        self.rng = rng
        self.log = log
        self._seen = 0

    def sync(self, agent: DQNAgent) -> None:
        """Skip transitions the agent made before selection started."""
        self._seen = agent.replay.writes

    def _own(self, agent: DQNAgent) -> None:
        fresh = min(agent.replay.writes - self._seen, len(agent.replay))
        if fresh > 0:
            idx = (agent.replay.cursor - np.arange(fresh, 0, -1)) % agent.replay.capacity
            self.buffer.extend(agent.replay.gather(idx))
        self._seen = agent.replay.writes

    def draw(self, agent: DQNAgent) -> Batch | None:
        self._own(agent)
        if len(self.buffer) == 0:
            return None
        return self.buffer.sample(self.rng, self.batch_size)

    def filter(self, batch: Batch, q_sa: np.ndarray, y: np.ndarray) -> np.ndarray:
        keep = selection_mask(q_sa, y, self.rule)
        self.log.minibatches += 1
        self.log.drawn += len(batch)
        if not keep.all():
            self.log.removed += self.buffer.remove(batch.index[~keep])
        if not keep.any():
            self.log.skipped += 1
        return keep

    def audit(self, batch: Batch, q_sa: np.ndarray, y: np.ndarray) -> None:
        """Called on the samples actually trained on, before the update."""
        self.log.trained += len(batch)
        self.log.violations += int(np.sum(~selection_mask(q_sa, y, self.rule)))


@dataclass
class TransferResult:
    stats: list[EpisodeStats]
    log: SelectionLog
    shortfalls: dict[str, int] = field(default_factory=dict)
    collected: dict[str, int] = field(default_factory=dict)


def _refill(buffer: ReplayBuffer, agent: DQNAgent, sources: list[SourceData], config: TransferConfig,
            target_featurizer: BsmFeaturizer, rng: np.random.Generator, epsilon: float,
            result: TransferResult) -> None:
    missing = buffer.capacity - len(buffer)
    if missing <= 0:
        return
    own = min(int(round(config.own_fraction * missing)), len(agent.replay))
    if own:
        buffer.extend(agent.replay.gather(np.sort(rng.choice(len(agent.replay), size=own, replace=False))))
    quota = missing - own
    active = list(range(len(sources)))
    eps = epsilon if config.source_epsilon is None else config.source_epsilon
    while quota > 0 and active:
        trusts = [sources[i].trust for i in active]
        if sum(trusts) <= 0:
            trusts = [1.0] * len(active)
        still = []
        got_total = 0
        for i, c in zip(active, sample_allocation(trusts, quota)):
            s = sources[i]
            got = collect_source_samples(s.policy, s.records, int(c), agent.config.rewards,
                                         target_featurizer, rng, agent.spec.window, eps,
                                         s.policy.window_key)
            if got.batch is not None:
                buffer.extend(got.batch)
                got_total += len(got.batch)
                result.collected[s.policy.name] = result.collected.get(s.policy.name, 0) + len(got.batch)
            if got.shortfall:
                result.shortfalls[s.policy.name] = result.shortfalls.get(s.policy.name, 0) + got.shortfall
            else:
                still.append(i)
        quota -= got_total
        # sources that ran dry drop out; the rest share what is left
        if got_total == 0 or len(still) == len(active):
            break
        active = still


def train_target(agent: DQNAgent, target_trace: EncodedTrace, sources: list[SourceData],
                 config: TransferConfig, n_episodes: int, target_featurizer: BsmFeaturizer,
                 callback=None) -> TransferResult:
    """Train ``agent`` with selective experience transfer from ``sources``.

    For the first ``selection_fraction`` of episodes minibatches come from the
    transfer buffer, refilled at every episode start with trust-weighted
    source transitions and some of the agent's own replay, and fed the
    agent's new transitions as they happen; afterwards (or throughout, when no source is selected)
    the agent runs plain DQN on its own replay.  Transfer bookkeeping uses
    its own random stream so an empty source list reproduces a baseline run
    exactly.
    """
    result = TransferResult([], SelectionLog())
    if not sources:
        log.warning("no trusted sources selected; training from scratch")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A5F]))
    n_sel = config.selection_episodes(n_episodes) if sources else 0
    buffer = ReplayBuffer(config.buffer_size, agent.spec) if n_sel else None
    sampler = SelectiveSampler(buffer, agent.config.batch_size, rng, result.log, config.selection_rule) \
        if n_sel else None
    if sampler is not None:
        sampler.sync(agent)
    for ep in range(n_episodes):
        eps = agent.config.epsilon(ep, n_episodes)
        selecting = ep < n_sel
        if selecting:
            _refill(buffer, agent, sources, config, target_featurizer, rng, eps, result)
            agent.sampler = sampler
            agent.batch_filter = sampler.filter
            agent.on_train = sampler.audit
        else:
            agent.sampler = None
            agent.batch_filter = None
            agent.on_train = None
        s = agent.run_episode(target_trace, eps, episode=ep)
        s.phase = "selection" if selecting else "plain-dqn"
        result.stats.append(s)
        if callback is not None:
            callback(s)
    agent.sampler = None
    agent.batch_filter = None
    agent.on_train = None
    result.collected = dict(sorted(result.collected.items()))
    result.shortfalls = dict(sorted(result.shortfalls.items()))
    return result


def transfer_run_csv(stats: list[EpisodeStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "phase", "cumulative_reward", "epsilon", "tp", "tn", "fp", "fn"])
    for s in stats:
        r = s.row()
        w.writerow([r["episode"], s.phase or "plain-dqn", r["cumulative_reward"], r["epsilon"],
                    r["tp"], r["tn"], r["fp"], r["fn"]])
    return buf.getvalue()
