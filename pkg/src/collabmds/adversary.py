"""Poisoning attacks on a source RSU's training.

Two attacks are modelled.  Label flipping relabels every message of a random
subset of misbehaving vehicles as genuine before training.  Policy induction
leaves the data alone and instead perturbs the states the victim observes
while it trains: an adversarial policy (a DQN trained on inverted rewards)
picks the action the attacker wants, and a pair of replica networks that
shadow the victim turns that wish into an FGSM perturbation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .agent import AgentConfig, DQNAgent, Experience, ReplayBuffer, td_target
from .features import encode_trace
from .nn import (
    NetworkParams,
    NetworkSpec,
    NumericError,
    backprop,
    forward,
    forward_with_cache,
    make_optimizer,
    td_loss_and_grad,
)
from .trace import BsmRecord


@dataclass
class FlipConfig:
    zeta: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.zeta <= 1:
            raise ValueError("zeta must be in (0, 1]")


@dataclass
class InductionConfig:
    epsilon: float = 0.05
    replica_fraction: float = 0.1
    adversary_episodes: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("FGSM epsilon must be positive")
        if not 0 < self.replica_fraction < 1:
            raise ValueError("replica_fraction must be in (0, 1)")
        if self.adversary_episodes < 1:
            raise ValueError("adversary_episodes must be >= 1")


def flip_labels(records: list[BsmRecord], config: FlipConfig) -> tuple[list[BsmRecord], list[str]]:
    """Relabel every message of ceil(zeta * M) misbehaving vehicles as genuine."""
    bad = sorted({r.true_sender_id for r in records if r.label == 1})
    if not bad:
        raise ValueError("no misbehaving vehicles to flip")
    k = math.ceil(config.zeta * len(bad) - 1e-9)
    rng = np.random.default_rng(config.rng_seed)
    chosen = sorted(bad[i] for i in rng.choice(len(bad), size=k, replace=False))
    hit = set(chosen)
    out = [r.with_label(0) if r.true_sender_id in hit and r.label == 1 else r for r in records]
    return out, chosen


def adversary_slice_size(n_records: int, fraction: float) -> int:
    return int(math.floor(n_records * fraction + 1e-9))


def build_adversarial_policy(victim_records: list[BsmRecord], featurizer, spec: NetworkSpec,
                             induction: InductionConfig, agent_config: AgentConfig | None = None,
                             window_key: str = "pseudo") -> NetworkParams:
    """Train a DQN on inverted rewards over the first fraction of the victim's data.

    The returned greedy policy tries to be wrong: it flags genuine traffic
    and lets misbehavior through.
    """
    n = adversary_slice_size(len(victim_records), induction.replica_fraction)
    if n < 1:
        raise ValueError("victim slice too small for the adversary's training fraction")
    part = victim_records[:n]
    encoded = encode_trace(featurizer, part, spec.window, window_key)
    base = agent_config or AgentConfig()
    cfg = AgentConfig(**{**vars(base), "rewards": base.rewards.invert(),
                         "replay_capacity": max(base.batch_size + 1, min(base.replay_capacity, 50_000))})
    adv = DQNAgent(spec, cfg, seed=induction.rng_seed)
    adv.train(encoded, induction.adversary_episodes)
    return adv.params


def _fgsm_direction(params: NetworkParams, seq, acts, a_adv) -> np.ndarray:
    """Gradient w.r.t. the feature windows of the targeted squared error.

    The target vector is one-hot at ``a_adv`` scaled by the current max |Q|
    (at least 1), so descending it raises Q(s, a_adv) relative to the other
    action.
    """
    q, cache = forward_with_cache(params, seq, acts)
    B = q.shape[0]
    scale = np.maximum(np.abs(q).max(axis=1), 1.0)
    target = np.zeros_like(q)
    target[np.arange(B), a_adv] = scale
    bundle = backprop(params, cache, q - target)
    if not np.all(np.isfinite(bundle.seq)):
        raise NumericError("non-finite input gradient")
    return bundle.seq


def craft_perturbation(replica: NetworkParams, seq, acts, a_adv, epsilon: float) -> np.ndarray:
    """Targeted FGSM step on the feature window only.

    Moves each feature slot by ``epsilon`` against the gradient of the
    targeted squared error, i.e. toward making ``a_adv`` the greedy action.
    Slots with zero gradient are left alone.  Works on one state ``(n, d)``
    or a batch ``(B, n, d)``.
    """
    seq = np.asarray(seq, dtype=np.float64)
    single = seq.ndim == 2
    seq_b = seq[None] if single else seq
    acts_b = np.asarray(acts, dtype=np.float64)
    acts_b = acts_b[None] if single else acts_b
    a_b = np.atleast_1d(np.asarray(a_adv, dtype=np.intp))
    grad = _fgsm_direction(replica, seq_b, acts_b, a_b)
    delta = -epsilon * np.sign(grad)
    return delta[0] if single else delta


@dataclass
class ReplicaPair:
    """The attacker's online replica Q' and its target copy."""

    online: NetworkParams
    target: NetworkParams

    @classmethod
    def initialize(cls, spec: NetworkSpec, rng: np.random.Generator) -> ReplicaPair:
        online = NetworkParams.initialize(spec, rng)
        return cls(online, online.clone())


@dataclass
class PerturbationStats:
    count: int = 0
    max_abs: float = 0.0
    sum_abs: float = 0.0
    flips_toward_adv: int = 0

    def as_dict(self) -> dict:
        return {
            "perturbed_states": self.count,
            "max_abs_delta": self.max_abs,
            "mean_abs_delta": self.sum_abs / self.count if self.count else 0.0,
            "replica_argmax_matches_adv": self.flips_toward_adv,
        }


class PolicyInductionHook:
    """Observation hook that perturbs every next state the victim sees.

    The replicas train alongside the victim on the transitions it actually
    stores, with their own replay memory and the victim's optimizer
    settings; the victim's weights, reward and optimizer are never touched.
    """

    def __init__(self, adversarial_policy: NetworkParams, spec: NetworkSpec,
                 induction: InductionConfig, agent_config: AgentConfig):
        self.policy = adversarial_policy
        self.config = induction
        self.agent_config = agent_config
        ss = np.random.SeedSequence(induction.rng_seed).spawn(2)
        self.replicas = ReplicaPair.initialize(spec, np.random.default_rng(ss[0]))
        self.sample_rng = np.random.default_rng(ss[1])
        self.optimizer = make_optimizer(agent_config.optimizer, agent_config.lr, agent_config.clip_norm)
        self.memory = ReplayBuffer(agent_config.replay_capacity, spec)
        self.steps = 0
        self.stats = PerturbationStats()
        self.last_delta: np.ndarray | None = None

    def observe(self, agent, seq, acts):
        a_adv = int(np.argmax(forward(self.policy, seq, acts)))
        delta = craft_perturbation(self.replicas.online, seq, acts, a_adv, self.config.epsilon)
        self.last_delta = delta
        s = self.stats
        s.count += 1
        m = float(np.abs(delta).max())
        s.max_abs = max(s.max_abs, m)
        s.sum_abs += float(np.abs(delta).mean())
        perturbed = seq + delta
        q = forward(self.replicas.online, perturbed, acts)
        s.flips_toward_adv += int(int(q[1] > q[0]) == a_adv)
        return perturbed

    def after_step(self, agent, exp: Experience) -> None:
        self.memory.push(exp.seq, exp.acts, exp.action, exp.reward, exp.next_seq, exp.next_acts, exp.terminal)
        bs = self.agent_config.batch_size
        if len(self.memory) < bs:
            return
        batch = self.memory.sample(self.sample_rng, bs)
        y = td_target(batch.reward, batch.next_seq, batch.next_acts, self.replicas.target,
                      self.agent_config.gamma, batch.terminal)
        grad = td_loss_and_grad(self.replicas.online, batch.seq, batch.acts, batch.action, y)
        self.optimizer.step(self.replicas.online, grad.params)
        self.steps += 1
        if self.steps % self.agent_config.target_sync == 0:
            self.replicas.target = self.replicas.online.clone()


def poison_training(victim: DQNAgent, adversarial_policy: NetworkParams,
                    induction: InductionConfig) -> PolicyInductionHook:
    """Attach a policy-induction hook to ``victim``; refuses a second install."""
    hook = PolicyInductionHook(adversarial_policy, victim.spec, induction, victim.config)
    victim.install_hook(hook)
    return hook


@dataclass
class AttackManifest:
    kind: str  # "none" | "flip" | "induction"
    seed: int
    zeta: float | None = None
    flipped_vehicles: list[str] = field(default_factory=list)
    fgsm_epsilon: float | None = None
    replica_fraction: float | None = None
    perturbation: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "seed": self.seed}
        if self.kind == "flip":
            out.update(zeta=self.zeta, flipped_vehicles=list(self.flipped_vehicles))
        elif self.kind == "induction":
            out.update(fgsm_epsilon=self.fgsm_epsilon, replica_fraction=self.replica_fraction,
                       perturbation=dict(self.perturbation))
        return out
