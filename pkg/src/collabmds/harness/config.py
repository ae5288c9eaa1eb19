"""Scenario configuration, loadable from TOML.

Every table in the file maps onto one dataclass below; unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import numpy as np

from ..adversary import FlipConfig, InductionConfig
from ..agent import AgentConfig
from ..features import DEFAULT_FEATURES, FEATURE_NAMES
from ..io import load_toml
from ..trace import AttackType, POSITION_VARIANTS, SPEED_VARIANTS

SCENARIOS = ("sc1", "sc2", "sc3")
ADVERSARIES = ("none", "flip", "induction")

# attack mixes per scenario case: (sources, target training, target test)
SC2_CASES = {
    "random": ((AttackType.DoS, AttackType.DoSRandom, AttackType.DoSRandomSybil),
               (AttackType.DoS, AttackType.DoSRandom),
               (AttackType.DoSRandomSybil,)),
    "disruptive": ((AttackType.DoS, AttackType.DoSDisruptive, AttackType.DoSDisruptiveSybil),
                   (AttackType.DoS, AttackType.DoSDisruptive),
                   (AttackType.DoSDisruptiveSybil,)),
}
# per-source attack (the last one is the slot the adversary poisons),
# target training attack, target-visible feature
SC3_CASES = {
    "position": ((AttackType.ConstantPositionOffset, AttackType.RandomPosition,
                  AttackType.RandomPositionOffset), AttackType.ConstantPosition, "pos", POSITION_VARIANTS),
    "speed": ((AttackType.ConstantSpeedOffset, AttackType.RandomSpeed,
               AttackType.RandomSpeedOffset), AttackType.ConstantSpeed, "spd", SPEED_VARIANTS),
}


class ConfigError(ValueError):
    pass


def derive_seed(seed: int, *tags) -> int:
    """Stable 32-bit sub-seed for a named component of a run."""
    words = [int(seed) & 0xFFFFFFFF, int(seed) >> 32]
    for t in tags:
        if isinstance(t, str):
            words.extend(t.encode("utf-8"))
        else:
            words.append(int(t))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


SCENARIO_DURATIONS = {"sc2": (6.0, 8.0, 16.0), "sc3": (20.0, 24.0, 20.0)}


@dataclass
class DataConfig:
    dataset: str | None = None  # canonical trace CSV to split instead of synthesizing (sc1)
    attack: str = "RandomPosition"  # sc1 attack type
    case: str = ""  # sc2: random | disruptive; sc3: position | speed
    n_vehicles: int = 60
    misbehaving_fraction: float = 0.3
    duration: float = 80.0  # sc1 trace length, split across all RSUs
    # sc2/sc3 trace lengths (per source, target train plus probe, target test);
    # None takes the scenario default, shorter for sc2 where DoS senders beacon 10x
    source_duration: float | None = None
    target_duration: float | None = None
    test_duration: float | None = None
    presence: tuple[float, float] = (1.0, 1.0)
    plan: tuple[float, ...] = (0.2, 0.2, 0.2, 0.4)  # sources..., target
    target_split: tuple[float, float, float] = (0.4, 0.2, 0.4)  # train, probe, test
    gen: dict = field(default_factory=dict)  # extra generator options

    def durations(self, scenario: str) -> tuple[float, float, float]:
        base = SCENARIO_DURATIONS.get(scenario, SCENARIO_DURATIONS["sc3"])
        given = (self.source_duration, self.target_duration, self.test_duration)
        return tuple(float(b if g is None else g) for g, b in zip(given, base))


@dataclass
class ModelConfig:
    window: int = 8
    hidden: int = 32
    dense: tuple[int, ...] = (32,)
    window_key: str = "pseudo"
    features: tuple[str, ...] | None = None  # None: norms, plus iat when DoS is present
    target_features: tuple[str, ...] | None = None  # sc3 default: the single observed norm
    iat_fill: float = 1.0


@dataclass
class BudgetConfig:
    source_episodes: int = 5
    target_episodes: int = 20


@dataclass
class ProbeConfig:
    probe_episodes: int = 10
    buffer_size: int = 1000
    selection_fraction: float = 0.4
    own_fraction: float = 0.25
    source_epsilon: float | None = None
    selection_rule: str = "q-ge-y"


@dataclass
class Variant:
    adversary: str
    t_th: float

    @property
    def name(self) -> str:
        return f"{self.adversary}@{self.t_th:g}"


DEFAULT_VARIANTS = (Variant("flip", 0.5), Variant("induction", 0.5), Variant("flip", 0.8))


@dataclass
class ScenarioConfig:
    scenario: str = "sc1"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    flip: FlipConfig = field(default_factory=FlipConfig)
    induction: InductionConfig = field(default_factory=InductionConfig)
    transfer: ProbeConfig = field(default_factory=ProbeConfig)
    variants: tuple[Variant, ...] = DEFAULT_VARIANTS

    def __post_init__(self):
        self.validate()

    # -- derived views -------------------------------------------------

    @property
    def case(self) -> str:
        if self.data.case:
            return self.data.case
        return {"sc2": "random", "sc3": "position"}.get(self.scenario, "")

    def attack_types_in_play(self) -> set[AttackType]:
        if self.scenario == "sc1":
            return {AttackType(self.data.attack)}
        if self.scenario == "sc2":
            src, tgt, test = SC2_CASES[self.case]
            return set(src) | set(tgt) | set(test)
        srcs, tgt, _, variants = SC3_CASES[self.case]
        return set(srcs) | {tgt} | set(variants)

    def source_features(self) -> tuple[str, ...]:
        if self.model.features is not None:
            return tuple(self.model.features)
        feats = tuple(DEFAULT_FEATURES)
        if any(t.is_dos for t in self.attack_types_in_play()):
            feats += ("iat",)
        return feats

    def target_features(self) -> tuple[str, ...]:
        if self.model.target_features is not None:
            return tuple(self.model.target_features)
        if self.scenario == "sc3":
            return (SC3_CASES[self.case][2],)
        return self.source_features()

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.scenario == "sc2" and self.case not in SC2_CASES:
            raise ConfigError(f"sc2 case must be one of {sorted(SC2_CASES)}")
        if self.scenario == "sc3" and self.case not in SC3_CASES:
            raise ConfigError(f"sc3 case must be one of {sorted(SC3_CASES)}")
        if self.data.duration <= 0 or min(self.data.durations(self.scenario)) <= 0:
            raise ConfigError("trace durations must be positive")
        if self.scenario == "sc1":
            AttackType.parse(self.data.attack)
            if self.data.attack == AttackType.Genuine.value:
                raise ConfigError("sc1 attack must be a misbehavior type")
        if self.data.dataset and self.scenario != "sc1":
            raise ConfigError("a dataset file is only split for sc1; sc2/sc3 are synthesized")
        if self.budget.source_episodes < 1 or self.budget.target_episodes < 1:
            raise ConfigError("episode budgets must be >= 1")
        if len(self.data.plan) < 2:
            raise ConfigError("plan needs at least one source and the target")
        if abs(sum(self.data.plan) - 1) > 1e-9 or min(self.data.plan) <= 0:
            raise ConfigError("plan fractions must be positive and sum to 1")
        if len(self.data.target_split) != 3 or min(self.data.target_split) <= 0 \
                or abs(sum(self.data.target_split) - 1) > 1e-9:
            raise ConfigError("target_split needs three positive fractions summing to 1")
        for feats in (self.source_features(), self.target_features()):
            bad = [f for f in feats if f not in FEATURE_NAMES]
            if bad:
                raise ConfigError(f"unknown features {bad}")
        dos = any(t.is_dos for t in self.attack_types_in_play())
        if dos and "iat" not in self.source_features():
            raise ConfigError("DoS variants are frequency attacks: enable the 'iat' feature")
        if self.model.window_key not in ("pseudo", "global"):
            raise ConfigError("window_key must be 'pseudo' or 'global'")
        for v in self.variants:
            if v.adversary not in ADVERSARIES:
                raise ConfigError(f"variant adversary must be one of {ADVERSARIES}")
            if not 0 <= v.t_th <= 1:
                raise ConfigError("variant t_th must be in [0, 1]")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate variants")

    @property
    def n_sources(self) -> int:
        return len(self.data.plan) - 1

    # -- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "scenario": self.scenario,
            "seed": self.seed,
            "data": asdict(self.data),
            "model": asdict(self.model),
            "agent": self.agent.to_dict(),
            "budget": asdict(self.budget),
            "flip": asdict(self.flip),
            "induction": asdict(self.induction),
            "transfer": asdict(self.transfer),
            "variants": [{"adversary": v.adversary, "t_th": v.t_th} for v in self.variants],
        }
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for key in ("scenario", "seed"):
            if key in d:
                kw[key] = d[key]
        if "scenario" in kw:
            kw["scenario"] = str(kw["scenario"]).lower()
        sections = {"data": DataConfig, "model": ModelConfig, "budget": BudgetConfig,
                    "flip": FlipConfig, "induction": InductionConfig, "transfer": ProbeConfig}
        for key, typ in sections.items():
            if key in d:
                kw[key] = _build(typ, d[key], key)
        if "agent" in d:
            try:
                kw["agent"] = AgentConfig.from_dict(d["agent"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[agent]: {exc}") from None
        if "variants" in d:
            kw["variants"] = tuple(Variant(str(v["adversary"]), float(v["t_th"])) for v in d["variants"])
        return cls(**kw)

    @classmethod
    def from_toml(cls, path) -> ScenarioConfig:
        return cls.from_dict(load_toml(path))

    def with_overrides(self, *, scenario=None, seed=None, t_th=None, adversary=None) -> ScenarioConfig:
        """Apply command-line overrides.

        ``t_th`` and ``adversary`` narrow the transfer variants: both given
        selects exactly one variant; one given keeps the default variants
        that match, substituting the given value.
        """
        cfg = replace(self)
        if scenario is not None:
            cfg.scenario = scenario.lower()
        if seed is not None:
            cfg.seed = int(seed)
        if t_th is not None or adversary is not None:
            if t_th is not None and adversary is not None:
                variants = (Variant(adversary, float(t_th)),)
            elif adversary is not None:
                variants = tuple(Variant(adversary, v.t_th) for v in self.variants)
            else:
                advs = dict.fromkeys(v.adversary for v in self.variants)
                variants = tuple(Variant(a, float(t_th)) for a in advs)
            cfg.variants = tuple({v.name: v for v in variants}.values())
        cfg.validate()
        return cfg


def _build(typ, d: dict, section: str):
    known = {f.name for f in fields(typ)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    kw = {}
    for f in fields(typ):
        if f.name in d:
            v = d[f.name]
            if isinstance(v, list):
                v = tuple(v)
            kw[f.name] = v
    try:
        return typ(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
