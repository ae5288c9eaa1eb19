"""The DQN detection agent: environment stepping, replay and TD training.

An episode is one pass over an encoded trace.  At each step the agent sees
the feature window of the current message's stream plus the actions it took
on that stream's previous messages, flags the message (1) or lets it pass
(0), and is rewarded from the ground-truth label.  The next state is the
state of the next received message; only the last message of the pass is
terminal.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, fields
from typing import Callable, Protocol

import numpy as np

from .features import EncodedTrace
from .nn import (
    NetworkParams,
    NetworkSpec,
    forward,
    forward_with_cache,
    make_optimizer,
    td_loss_and_grad,
)
from .trace import ConfusionCounts


@dataclass(frozen=True)
class RewardConfig:
    """Confusion-matrix rewards: TP +a, TN +b, FP -c, FN -d.

    ``inverted`` negates every entry, which is what the policy-induction
    adversary trains its own DQN on.
    """

    a: float = 1.0
    b: float = 0.5
    c: float = 0.5
    d: float = 1.0
    inverted: bool = False

    def __post_init__(self):
        if not (self.a > self.b > 0 and self.d > self.c > 0):
            raise ValueError("reward constants need a > b > 0 and d > c > 0")

    @property
    def table(self) -> np.ndarray:
        """``table[action, label]``."""
        t = np.array([[self.b, -self.d], [-self.c, self.a]])
        return -t if self.inverted else t

    def invert(self) -> RewardConfig:
        return RewardConfig(self.a, self.b, self.c, self.d, not self.inverted)


def reward(action: int, label: int, config: RewardConfig) -> float:
    if action not in (0, 1) or label not in (0, 1):
        raise ValueError("action and label must be 0 or 1")
    return float(config.table[action, label])


@dataclass
class AgentConfig:
    lr: float = 0.001
    gamma: float = 0.995
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.6
    batch_size: int = 32
    replay_capacity: int = 50_000
    target_sync: int = 500
    optimizer: str = "adam"
    clip_norm: float | None = 5.0
    rewards: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if isinstance(self.rewards, dict):
            self.rewards = RewardConfig(**self.rewards)
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must be in (0, 1)")
        if not self.replay_capacity > self.batch_size >= 1:
            raise ValueError("need replay_capacity > batch_size >= 1")
        if self.target_sync < 1:
            raise ValueError("target_sync must be >= 1")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if not 0 < self.eps_decay_fraction <= 1:
            raise ValueError("eps_decay_fraction must be in (0, 1]")

    def epsilon(self, episode: int, n_episodes: int) -> float:
        """Linear decay over the first ``eps_decay_fraction`` of the episodes."""
        horizon = max(1.0, self.eps_decay_fraction * n_episodes)
        frac = min(1.0, episode / horizon)
        return self.eps_start + (self.eps_end - self.eps_start) * frac

    @classmethod
    def from_dict(cls, d: dict) -> AgentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown agent options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        r = self.rewards
        out["rewards"] = {"a": r.a, "b": r.b, "c": r.c, "d": r.d, "inverted": r.inverted}
        return out


@dataclass
class Experience:
    seq: np.ndarray
    acts: np.ndarray
    action: int
    reward: float
    next_seq: np.ndarray
    next_acts: np.ndarray
    terminal: bool


@dataclass
class Batch:
    """A stack of transitions, column-wise."""

    seq: np.ndarray
    acts: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_seq: np.ndarray
    next_acts: np.ndarray
    terminal: np.ndarray
    index: np.ndarray | None = None  # buffer slots, when drawn from a buffer

    def __len__(self) -> int:
        return len(self.action)

    def subset(self, mask) -> Batch:
        idx = None if self.index is None else self.index[mask]
        return Batch(self.seq[mask], self.acts[mask], self.action[mask], self.reward[mask],
                     self.next_seq[mask], self.next_acts[mask], self.terminal[mask], idx)

    @classmethod
    def from_experiences(cls, exps: list[Experience]) -> Batch:
        return cls(
            np.array([e.seq for e in exps], dtype=np.float64),
            np.array([e.acts for e in exps], dtype=np.float64),
            np.array([e.action for e in exps], dtype=np.intp),
            np.array([e.reward for e in exps], dtype=np.float64),
            np.array([e.next_seq for e in exps], dtype=np.float64),
            np.array([e.next_acts for e in exps], dtype=np.float64),
            np.array([e.terminal for e in exps], dtype=bool),
        )

    @classmethod
    def concat(cls, batches: list[Batch]) -> Batch:
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("seq", "acts", "action", "reward", "next_seq", "next_acts", "terminal")))


class ReplayBuffer:
    """Fixed-capacity transition store with uniform sampling.

    Writes go round-robin once full.  ``remove`` deletes arbitrary slots by
    moving the last occupied slot into the hole, so the occupied region
    stays contiguous.
    """

    def __init__(self, capacity: int, spec: NetworkSpec):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        n, d = spec.window, spec.n_features
        self.seq = np.zeros((capacity, n, d))
        self.acts = np.zeros((capacity, n))
        self.action = np.zeros(capacity, dtype=np.intp)
        self.reward = np.zeros(capacity)
        self.next_seq = np.zeros((capacity, n, d))
        self.next_acts = np.zeros((capacity, n))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0
        self.writes = 0

    def __len__(self) -> int:
        return self.size

    def _columns(self):
        return (self.seq, self.acts, self.action, self.reward, self.next_seq, self.next_acts, self.terminal)

    def push(self, seq, acts, action, r, next_seq, next_acts, terminal) -> None:
        i = self.cursor
        self.seq[i] = seq
        self.acts[i] = acts
        self.action[i] = action
        self.reward[i] = r
        self.next_seq[i] = next_seq
        self.next_acts[i] = next_acts
        self.terminal[i] = terminal
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.writes += 1

    def extend(self, batch: Batch) -> None:
        for k in range(len(batch)):
            self.push(batch.seq[k], batch.acts[k], batch.action[k], batch.reward[k],
                      batch.next_seq[k], batch.next_acts[k], batch.terminal[k])

    def gather(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.intp)
        return Batch(*(col[idx] for col in self._columns()), index=idx)

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.gather(rng.integers(0, self.size, size=batch_size))

    def all(self) -> Batch:
        return self.gather(np.arange(self.size))

    def remove(self, idx) -> int:
        """Delete the given slots (duplicates allowed); returns how many went."""
        doomed = np.unique(np.asarray(idx, dtype=np.intp))
        doomed = doomed[doomed < self.size]
        for i in doomed[::-1]:
            last = self.size - 1
            if i != last:
                for col in self._columns():
                    col[i] = col[last]
            self.size -= 1
        self.cursor = self.size % self.capacity
        return len(doomed)

    def clear(self) -> None:
        self.size = 0
        self.cursor = 0


@dataclass
class EpisodeStats:
    episode: int
    cumulative_reward: float
    epsilon: float
    counts: ConfusionCounts
    mean_loss: float = float("nan")
    train_steps: int = 0
    phase: str = ""

    def row(self) -> dict:
        return {
            "episode": self.episode,
            "cumulative_reward": round(self.cumulative_reward, 10),
            "epsilon": round(self.epsilon, 10),
            **self.counts.as_dict(),
        }


EPISODE_FIELDS = ("episode", "cumulative_reward", "epsilon", "tp", "tn", "fp", "fn")


def episodes_csv(stats: list[EpisodeStats], extra_fields: tuple[str, ...] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_FIELDS + extra_fields)
    for s in stats:
        row = s.row()
        w.writerow([row[k] for k in EPISODE_FIELDS] + [getattr(s, k) for k in extra_fields])
    return buf.getvalue()


def select_action(params: NetworkParams, seq, acts, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; exact ties go to action 0."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must be in [0, 1]")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(2))
    q = forward(params, seq, acts)
    return int(q[1] > q[0])


def td_target(r, next_seq, next_acts, target_params: NetworkParams, gamma: float, terminal) -> np.ndarray | float:
    """``r`` at a terminal step, else ``r + gamma * max_a Q_target(s', a)``.

    Works on a single transition or a batch.
    """
    r = np.asarray(r, dtype=np.float64)
    terminal = np.asarray(terminal, dtype=bool)
    if r.ndim == 0:
        if terminal:
            return float(r)
        return float(r + gamma * forward(target_params, next_seq, next_acts).max())
    q_next = forward(target_params, next_seq, next_acts).max(axis=1)
    return r + gamma * np.where(terminal, 0.0, q_next)


class ObservationHook(Protocol):
    """Interface for code that watches (and may alter) what the agent sees."""

    def observe(self, agent: DQNAgent, seq: np.ndarray, acts: np.ndarray) -> np.ndarray: ...

    def after_step(self, agent: DQNAgent, exp: Experience) -> None: ...


class TrainingSampler(Protocol):
    """Replaces plain replay sampling (used for experience transfer)."""

    def draw(self, agent: DQNAgent) -> Batch | None: ...


# returns a boolean keep-mask given (batch, Q(s,a), y)
BatchFilter = Callable[[Batch, np.ndarray, np.ndarray], np.ndarray]


class DQNAgent:
    """A single RSU's detection agent.

    All randomness comes from one seed, split into independent streams for
    weight init, exploration, replay sampling and episode ordering, so two
    agents built from the same seed start bit-identical.
    """

    def __init__(self, spec: NetworkSpec, config: AgentConfig | None = None, seed: int = 0):
        self.spec = spec
        self.config = config or AgentConfig()
        ss = np.random.SeedSequence(seed)
        init_ss, act_ss, sample_ss, order_ss = ss.spawn(4)
        self.params = NetworkParams.initialize(spec, np.random.default_rng(init_ss))
        self.target = self.params.clone()
        self.act_rng = np.random.default_rng(act_ss)
        self.sample_rng = np.random.default_rng(sample_ss)
        self.order_rng = np.random.default_rng(order_ss)
        self.optimizer = make_optimizer(self.config.optimizer, self.config.lr, self.config.clip_norm)
        self.replay = ReplayBuffer(self.config.replay_capacity, spec)
        self.steps = 0
        self.hook: ObservationHook | None = None
        self.sampler: TrainingSampler | None = None
        self.batch_filter: BatchFilter | None = None
        self.on_train: Callable[[Batch, np.ndarray, np.ndarray], None] | None = None

    # -- hooks --------------------------------------------------------

    def install_hook(self, hook: ObservationHook) -> None:
        if self.hook is not None:
            raise RuntimeError("an observation hook is already installed")
        self.hook = hook

    def remove_hook(self) -> None:
        self.hook = None

    # -- learning -----------------------------------------------------

    def sync_target(self) -> None:
        self.target = self.params.clone()

    def train_step(self, batch: Batch) -> float | None:
        """One optimizer step on the mean TD loss; returns the pre-step loss.

        With a ``batch_filter`` installed, only the samples it keeps are
        trained on; if it keeps none, no step is taken and None is returned.
        """
        if len(batch) == 0:
            raise ValueError("empty minibatch")
        y = td_target(batch.reward, batch.next_seq, batch.next_acts, self.target,
                      self.config.gamma, batch.terminal)
        q, cache = forward_with_cache(self.params, batch.seq, batch.acts)
        q_sa = q[np.arange(len(batch)), batch.action]
        if self.batch_filter is not None:
            keep = np.asarray(self.batch_filter(batch, q_sa, y), dtype=bool)
            if not keep.any():
                return None
            if not keep.all():
                batch, y = batch.subset(keep), y[keep]
                q, cache = forward_with_cache(self.params, batch.seq, batch.acts)
                q_sa = q[np.arange(len(batch)), batch.action]
        if self.on_train is not None:
            self.on_train(batch, q_sa, y)
        grad = td_loss_and_grad(self.params, batch.seq, batch.acts, batch.action, y, q_cache=(q, cache))
        self.optimizer.step(self.params, grad.params)
        self.steps += 1
        if self.steps % self.config.target_sync == 0:
            self.sync_target()
        return grad.loss

    def _draw(self) -> Batch | None:
        if self.sampler is not None:
            return self.sampler.draw(self)
        if len(self.replay) < self.config.batch_size:
            return None
        return self.replay.sample(self.sample_rng, self.config.batch_size)

    # -- interaction --------------------------------------------------

    def run_episode(self, trace: EncodedTrace, epsilon: float, episode: int = 0, learn: bool = True,
                    policy: Callable[[np.ndarray, np.ndarray, int], int] | None = None) -> EpisodeStats:
        """One pass over ``trace``.

        ``policy`` overrides action selection (it receives the observed
        feature window, the action window and the message index); used to
        score fixed reference policies.
        """
        if len(trace) == 0:
            raise ValueError("empty trace")
        order = trace.episode_order(self.order_rng)
        n = self.spec.window
        history = np.zeros((trace.n_keys, n))
        table = self.config.rewards.table
        labels = trace.labels
        keys = trace.keys
        counts = ConfusionCounts()
        total = 0.0
        losses = []

        first = order[0]
        seq = trace.windows[first]
        acts = history[keys[first]].copy()
        if self.hook is not None:
            seq = self.hook.observe(self, seq, acts)
        for t, idx in enumerate(order):
            if policy is not None:
                a = int(policy(seq, acts, int(idx)))
            else:
                a = select_action(self.params, seq, acts, epsilon, self.act_rng)
            label = int(labels[idx])
            r = float(table[a, label])
            counts.add(a, label)
            total += r
            k = keys[idx]
            history[k, :-1] = history[k, 1:]
            history[k, -1] = a
            terminal = t == len(order) - 1
            if terminal:
                next_seq = np.zeros_like(seq)
                next_acts = np.zeros_like(acts)
            else:
                nxt = order[t + 1]
                next_seq = trace.windows[nxt]
                next_acts = history[keys[nxt]].copy()
                if self.hook is not None:
                    next_seq = self.hook.observe(self, next_seq, next_acts)
            if learn:
                self.replay.push(seq, acts, a, r, next_seq, next_acts, terminal)
                if self.hook is not None:
                    self.hook.after_step(self, Experience(seq, acts, a, r, next_seq, next_acts, terminal))
                batch = self._draw()
                if batch is not None:
                    loss = self.train_step(batch)
                    if loss is not None:
                        losses.append(loss)
            seq, acts = next_seq, next_acts
        return EpisodeStats(episode, total, epsilon, counts,
                            float(np.mean(losses)) if losses else float("nan"), len(losses))

    def train(self, trace: EncodedTrace, n_episodes: int,
              callback: Callable[[EpisodeStats], None] | None = None) -> list[EpisodeStats]:
        stats = []
        for ep in range(n_episodes):
            s = self.run_episode(trace, self.config.epsilon(ep, n_episodes), episode=ep)
            stats.append(s)
            if callback is not None:
                callback(s)
        return stats


# -- greedy evaluation ----------------------------------------------------


@dataclass
class GreedyPass:
    """Result of running a fixed greedy policy over a trace."""

    actions: np.ndarray  # per message, in trace order
    acts_before: np.ndarray  # (N, n) action window each message was judged with

    def counts(self, labels) -> ConfusionCounts:
        return ConfusionCounts.from_arrays(self.actions, labels)


def greedy_pass(params: NetworkParams, trace: EncodedTrace,
                transform: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
                epsilon: float = 0.0, rng: np.random.Generator | None = None) -> GreedyPass:
    """Greedy (or epsilon-greedy) actions for every message, without learning.

    A message's state only depends on earlier messages of its own stream, so
    with per-pseudonym streams all messages at the same stream position are
    evaluated as one batch.  A single global stream is walked in order.
    ``transform`` may rewrite the feature windows of a batch before the
    network sees them.  With ``epsilon > 0`` each action is replaced by a
    coin flip with that probability (``rng`` required).
    """
    if epsilon > 0 and rng is None:
        raise ValueError("epsilon > 0 needs an rng")
    n = params.spec.window
    N = len(trace)
    actions = np.zeros(N, dtype=np.int8)
    acts_before = np.zeros((N, n))
    history = np.zeros((trace.n_keys, n))
    if trace.window_key == "global":
        groups = [np.array([i]) for i in range(N)]
    else:
        by_rank = np.argsort(trace.rank, kind="stable")
        bounds = np.searchsorted(trace.rank[by_rank], np.arange(trace.rank.max() + 2))
        groups = [by_rank[bounds[r]:bounds[r + 1]] for r in range(len(bounds) - 1)]
    for idx in groups:
        if len(idx) == 0:
            continue
        k = trace.keys[idx]
        acts = history[k]
        seq = trace.windows[idx]
        if transform is not None:
            seq = transform(seq, acts)
        q = forward(params, seq, acts)
        a = (q[:, 1] > q[:, 0]).astype(np.int8)
        if epsilon > 0:
            explore = rng.random(len(idx)) < epsilon
            a = np.where(explore, rng.integers(0, 2, size=len(idx)), a).astype(np.int8)
        actions[idx] = a
        acts_before[idx] = acts
        history[k, :-1] = history[k, 1:]
        history[k, -1] = a
    return GreedyPass(actions, acts_before)


def evaluate(params: NetworkParams, trace: EncodedTrace) -> ConfusionCounts:
    """Greedy confusion counts on ``trace``; touches no buffers or weights."""
    return greedy_pass(params, trace).counts(trace.labels)


def greedy_return(params: NetworkParams, trace: EncodedTrace, rewards: RewardConfig) -> float:
    gp = greedy_pass(params, trace)
    return float(rewards.table[gp.actions, trace.labels].sum())
