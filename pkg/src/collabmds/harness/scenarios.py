"""End-to-end scenario pipeline.

A scenario prepares per-RSU data, trains the source agents (one of them
poisoned), ranks the sources by how well their policies do on the target's
probe slice, then trains the target once from scratch and once per transfer
variant, all from the same initialization, and scores every run on the
scenario's test set.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..adversary import (
    AttackManifest, FlipConfig, InductionConfig, build_adversarial_policy, flip_labels, poison_training,
)
from ..agent import AgentConfig, DQNAgent, EpisodeStats, episodes_csv, evaluate
from ..features import BsmFeaturizer, encode_trace
from ..ingest import SplitPlan, split_by_time
from ..io import atomic_write_text, read_json, write_json
from ..nn import NetworkParams, NetworkSpec, dumps_checkpoint, loads_checkpoint
from ..synth import GenConfig, generate
from ..trace import AttackType, BsmRecord, ConfusionCounts, read_trace, write_trace
from ..transfer import (
    SourceData, SourcePolicy, TransferConfig, TrustReport, probe_return, rank_sources, train_target,
    transfer_run_csv,
)
from .config import SC2_CASES, SC3_CASES, ConfigError, ScenarioConfig, Variant, derive_seed
from .metrics import metrics

log = logging.getLogger(__name__)

SUMMARY_SCHEMA = "collabmds-summary"
SUMMARY_VERSION = 1

# exit codes per pipeline stage
STAGES = {"config": 2, "data": 3, "source": 4, "rank": 5, "target": 6, "report": 7}


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage it happened in."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = STAGES.get(stage, 1)


# -- data ---------------------------------------------------------------------


@dataclass
class ScenarioData:
    sources: dict[str, list[BsmRecord]]
    target_train: list[BsmRecord]
    target_probe: list[BsmRecord]
    target_test: list[BsmRecord]

    def parts(self) -> dict[str, list[BsmRecord]]:
        out = {f"source-{k}": v for k, v in self.sources.items()}
        out.update(target_train=self.target_train, target_probe=self.target_probe,
                   target_test=self.target_test)
        return out

    def manifest(self) -> dict:
        out = {}
        for role, recs in self.parts().items():
            vehicles: dict[str, int] = {}
            for r in recs:
                vehicles[r.true_sender_id] = max(vehicles.get(r.true_sender_id, 0), r.label)
            attacks = sorted({r.attack_type.value for r in recs})
            out[role] = {
                "messages": len(recs),
                "misbehaving_messages": int(sum(r.label for r in recs)),
                "vehicles": len(vehicles),
                "misbehaving_vehicles": int(sum(vehicles.values())),
                "attack_types": attacks,
            }
        return out


def source_names(n_sources: int) -> list[str]:
    """Genuine RSUs first; the last slot is the one an adversary may poison."""
    return [f"genuine-{i + 1}" for i in range(n_sources - 1)] + ["malicious"]


def _gen(cfg: ScenarioConfig, attacks, duration: float, tag: str) -> list[BsmRecord]:
    d = cfg.data
    opts = dict(d.gen)
    gc = GenConfig(**{
        **opts,
        "n_vehicles": d.n_vehicles,
        "misbehaving_fraction": d.misbehaving_fraction,
        "duration": duration,
        "attack_types": tuple(AttackType(a) for a in attacks),
        "presence": tuple(d.presence),
        "rng_seed": derive_seed(cfg.seed, "data", tag),
        "id_prefix": opts.get("id_prefix", f"{tag}-"),
    })
    return generate(gc)


def _split(records, fractions, roles) -> dict[str, list[BsmRecord]]:
    return split_by_time(records, SplitPlan(tuple(fractions), tuple(roles)))


def prepare_data(cfg: ScenarioConfig) -> ScenarioData:
    """Build or load the per-RSU slices for ``cfg.scenario``."""
    d = cfg.data
    names = source_names(cfg.n_sources)
    if cfg.scenario == "sc1":
        if d.dataset:
            records = read_trace(d.dataset)
        else:
            records = _gen(cfg, (d.attack,), d.duration, "sc1")
        parts = _split(records, d.plan, names + ["target"])
        sources = {n: parts[n] for n in names}
        tgt = _split(parts["target"], d.target_split, ("train", "probe", "test"))
        return ScenarioData(sources, tgt["train"], tgt["probe"], tgt["test"])

    tr, pr, _ = d.target_split
    src_len, tgt_len, test_len = d.durations(cfg.scenario)
    train_probe = (tr / (tr + pr), pr / (tr + pr))
    if cfg.scenario == "sc2":
        src_attacks, tgt_attacks, test_attacks = SC2_CASES[cfg.case]
        pooled = _gen(cfg, [a.value for a in src_attacks], src_len * cfg.n_sources, "src")
        parts = _split(pooled, [1.0 / cfg.n_sources] * cfg.n_sources, names)
        sources = {n: parts[n] for n in names}
    else:
        per_source, tgt_attack, _, variants = SC3_CASES[cfg.case]
        if cfg.n_sources != len(per_source):
            raise ConfigError(f"sc3 uses exactly {len(per_source)} sources")
        sources = {n: _gen(cfg, (a.value,), src_len, f"src{i}")
                   for i, (n, a) in enumerate(zip(names, per_source))}
        tgt_attacks, test_attacks = (tgt_attack,), variants
    target = _gen(cfg, [a.value for a in tgt_attacks], tgt_len, "tgt")
    tp = _split(target, train_probe, ("train", "probe"))
    test = _gen(cfg, [a.value for a in test_attacks], test_len, "test")
    return ScenarioData(sources, tp["train"], tp["probe"], test)


# -- models ---------------------------------------------------------------------


def network_spec(cfg: ScenarioConfig, n_features: int) -> NetworkSpec:
    m = cfg.model
    return NetworkSpec(window=m.window, n_features=n_features, hidden=m.hidden, dense=tuple(m.dense))


def fit_featurizer(records, features, iat_fill: float = 1.0) -> BsmFeaturizer:
    return BsmFeaturizer(tuple(features), iat_fill=iat_fill).fit(records)


def save_policy(path, policy: SourcePolicy, extra: dict | None = None) -> None:
    meta = {"name": policy.name, "featurizer": policy.featurizer.to_dict(),
            "window_key": policy.window_key, **(extra or {})}
    atomic_write_text(path, dumps_checkpoint(policy.params, extra=meta))


def load_policy(path) -> tuple[SourcePolicy, dict]:
    params, _, extra = loads_checkpoint(Path(path).read_text())
    if "featurizer" not in extra:
        raise ValueError(f"{path}: checkpoint carries no featurizer")
    fz = BsmFeaturizer.from_dict(extra["featurizer"])
    return SourcePolicy(extra.get("name", Path(path).stem), params, fz, extra.get("window_key", "pseudo")), extra


@dataclass
class SourceRun:
    policy: SourcePolicy
    kind: str
    records: list[BsmRecord]  # what the RSU trained on, poisoned labels included
    stats: list[EpisodeStats]
    manifest: AttackManifest

    def final_quartile_reward(self) -> float:
        return final_quartile_mean(self.stats)


def final_quartile_mean(stats: list[EpisodeStats]) -> float:
    k = max(1, math.ceil(len(stats) / 4))
    return float(np.mean([s.cumulative_reward for s in stats[-k:]]))


def train_source(name: str, records: list[BsmRecord], *, features, spec_of: Callable[[int], NetworkSpec],
                 agent_config: AgentConfig, n_episodes: int, seed: int, kind: str = "none",
                 flip: FlipConfig | None = None, induction: InductionConfig | None = None,
                 window_key: str = "pseudo", iat_fill: float = 1.0) -> SourceRun:
    """Train one source RSU, optionally under attack.

    ``kind`` is ``none``, ``flip`` (labels of some misbehaving vehicles are
    flipped before training) or ``induction`` (FGSM perturbations on every
    state the agent observes during training).
    """
    manifest = AttackManifest(kind, seed)
    if kind == "flip":
        flip = flip or FlipConfig()
        records, chosen = flip_labels(records, flip)
        manifest.zeta, manifest.flipped_vehicles = flip.zeta, chosen
    elif kind not in ("none", "induction"):
        raise ValueError(f"unknown adversary kind {kind!r}")
    fz = fit_featurizer(records, features, iat_fill)
    spec = spec_of(fz.n_features_out_)
    encoded = encode_trace(fz, records, spec.window, window_key)
    agent = DQNAgent(spec, agent_config, seed=seed)
    hook = None
    if kind == "induction":
        induction = induction or InductionConfig()
        adv = build_adversarial_policy(records, fz, spec, induction, agent_config, window_key)
        hook = poison_training(agent, adv, induction)
        manifest.fgsm_epsilon, manifest.replica_fraction = induction.epsilon, induction.replica_fraction
    stats = agent.train(encoded, n_episodes)
    if hook is not None:
        agent.remove_hook()
        manifest.perturbation = hook.stats.as_dict()
    return SourceRun(SourcePolicy(name, agent.params, fz, window_key), kind, records, stats, manifest)


# -- runs -----------------------------------------------------------------------


@dataclass
class TargetRun:
    name: str
    variant: Variant | None
    stats: list[EpisodeStats]
    counts: ConfusionCounts
    params: NetworkParams
    selected: list[str] = field(default_factory=list)
    selection: dict = field(default_factory=dict)
    collected: dict = field(default_factory=dict)

    @property
    def returns(self) -> np.ndarray:
        return np.array([s.cumulative_reward for s in self.stats])

    def final_mean(self, k: int = 10) -> float:
        return float(self.returns[-k:].mean())

    def label(self, malicious: str = "malicious") -> str:
        if self.variant is None:
            return "baseline"
        if not self.selected:
            who = "no source"
        elif malicious in self.selected and self.variant.adversary != "none":
            kind = {"flip": "label-flipping", "induction": "policy induction"}[self.variant.adversary]
            who = f"genuine+malicious ({kind})"
        else:
            who = "genuine"
        return f"w/{who} (T_th = {self.variant.t_th:g})"


def time_to_baseline(baseline: np.ndarray, run: np.ndarray) -> dict:
    """First episode (1-based) at which ``run`` reaches the baseline's best return."""
    best = float(baseline.max())
    hit = np.flatnonzero(run >= best)
    e = int(hit[0]) + 1 if hit.size else None
    E = len(baseline)
    return {
        "baseline_best": best,
        "episode": e,
        "budget": E,
        "reduction": None if e is None else 1.0 - e / E,
    }


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    data: ScenarioData
    sources: dict[str, SourceRun]  # keyed by "<name>" or "malicious:<kind>"
    trust: dict[str, TrustReport]  # keyed by variant name
    runs: dict[str, TargetRun]
    summary: dict
    timings: dict


def _source_key(name: str, kind: str) -> str:
    return name if name != "malicious" else f"malicious:{kind}"


def pool_for(sources: dict[str, SourceRun], names: list[str], kind: str) -> list[SourceRun]:
    return [sources[_source_key(n, kind)] for n in names]


def rank_pool(pool: list[SourceRun], probe_records, cfg: ScenarioConfig, t_th: float) -> TrustReport:
    rewards = cfg.agent.rewards
    returns = {s.policy.name: probe_return(s.policy, probe_records, cfg.transfer.probe_episodes, rewards)
               for s in pool}
    return rank_sources(returns, t_th)


def transfer_config(cfg: ScenarioConfig, t_th: float) -> TransferConfig:
    p = cfg.transfer
    return TransferConfig(probe_episodes=p.probe_episodes, t_th=t_th, buffer_size=p.buffer_size,
                          selection_fraction=p.selection_fraction, own_fraction=p.own_fraction,
                          selection_rule=p.selection_rule,
                          source_epsilon=p.source_epsilon, seed=derive_seed(cfg.seed, "transfer"))


def run_target(cfg: ScenarioConfig, data: ScenarioData, fz: BsmFeaturizer, name: str,
               variant: Variant | None, chosen: list[SourceRun], trusts: list[float]) -> TargetRun:
    spec = network_spec(cfg, fz.n_features_out_)
    wk = cfg.model.window_key
    train = encode_trace(fz, data.target_train, spec.window, wk)
    test = encode_trace(fz, data.target_test, spec.window, wk)
    agent = DQNAgent(spec, cfg.agent, seed=derive_seed(cfg.seed, "target"))
    sdata = [SourceData(s.policy, s.records, t) for s, t in zip(chosen, trusts)]
    tcfg = transfer_config(cfg, variant.t_th if variant else 1.0)
    res = train_target(agent, train, sdata, tcfg, cfg.budget.target_episodes, fz)
    return TargetRun(name, variant, res.stats, evaluate(agent.params, test), agent.params,
                     [s.policy.name for s in chosen],
                     res.log.as_dict() if sdata else {}, res.collected)


# -- pipeline -----------------------------------------------------------------


def _stage(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc


def train_sources(cfg: ScenarioConfig, data: ScenarioData, kinds,
                  on_source: Callable[[str, SourceRun, float], None] | None = None) -> dict[str, SourceRun]:
    """Train the genuine sources once and the last source once per adversary kind.

    Results are keyed as in ``pool_for``.  ``on_source`` gets each key, run
    and wall-clock seconds as soon as that source finishes.
    """
    names = source_names(cfg.n_sources)
    spec_of = lambda d: network_spec(cfg, d)  # noqa: E731
    jobs = [(n, "none") for n in names[:-1]] + [(names[-1], k) for k in kinds]
    sources: dict[str, SourceRun] = {}
    for n, kind in jobs:
        t0 = time.perf_counter()
        src = _stage("source", train_source, n, data.sources[n], features=cfg.source_features(),
                     spec_of=spec_of, agent_config=cfg.agent, n_episodes=cfg.budget.source_episodes,
                     seed=derive_seed(cfg.seed, "source", n), kind=kind,
                     flip=FlipConfig(cfg.flip.zeta, derive_seed(cfg.seed, "flip")),
                     induction=InductionConfig(cfg.induction.epsilon, cfg.induction.replica_fraction,
                                               cfg.induction.adversary_episodes,
                                               derive_seed(cfg.seed, "induction")),
                     window_key=cfg.model.window_key, iat_fill=cfg.model.iat_fill)
        key = _source_key(n, kind)
        sources[key] = src
        if on_source is not None:
            on_source(key, src, time.perf_counter() - t0)
    return sources


def run_scenario(cfg: ScenarioConfig, out_dir=None,
                 progress: Callable[[str], None] | None = None) -> ScenarioResult:
    """Execute the whole scenario; artifacts are written as each stage finishes."""
    say = progress or log.info
    out = Path(out_dir) if out_dir is not None else None
    timings: dict[str, float] = {}
    clock = time.perf_counter

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", cfg.to_dict())

    t0 = clock()
    data = _stage("data", prepare_data, cfg)
    timings["data"] = clock() - t0
    if out is not None:
        for role, recs in data.parts().items():
            write_trace(out / "data" / f"{role}.csv", recs)
        write_json(out / "data" / "manifest.json", data.manifest())
    say(f"data ready: {', '.join(f'{k}={len(v)}' for k, v in data.parts().items())}")

    names = source_names(cfg.n_sources)
    kinds = sorted({v.adversary for v in cfg.variants})

    def saved(key: str, src: SourceRun, seconds: float) -> None:
        timings[f"source:{key}"] = seconds
        if out is not None:
            d = out / "sources" / key.replace(":", "-")
            atomic_write_text(d / "episodes.csv", episodes_csv(src.stats))
            save_policy(d / "checkpoint.json", src.policy, {"adversary": src.kind})
            write_json(d / "attack_manifest.json", src.manifest.to_dict())
        say(f"source {key}: final-quartile reward {src.final_quartile_reward():.2f}")

    sources = train_sources(cfg, data, kinds, saved)

    trust: dict[str, TrustReport] = {}
    t0 = clock()
    for v in cfg.variants:
        pool = pool_for(sources, names, v.adversary)
        trust[v.name] = _stage("rank", rank_pool, pool, data.target_probe, cfg, v.t_th)
        if out is not None:
            write_json(out / "trust" / f"{v.name}.json", trust[v.name].to_dict())
    timings["rank"] = clock() - t0

    fz = _stage("target", fit_featurizer, data.target_train, cfg.target_features(), cfg.model.iat_fill)
    runs: dict[str, TargetRun] = {}
    t0 = clock()
    runs["baseline"] = _stage("target", run_target, cfg, data, fz, "baseline", None, [], [])
    timings["target:baseline"] = clock() - t0
    for v in cfg.variants:
        t0 = clock()
        rep = trust[v.name]
        pool = {s.policy.name: s for s in pool_for(sources, names, v.adversary)}
        chosen = [pool[e.name] for e in rep.selected]
        runs[v.name] = _stage("target", run_target, cfg, data, fz, v.name, v, chosen,
                              [e.trust for e in rep.selected])
        timings[f"target:{v.name}"] = clock() - t0
    if out is not None:
        for name, r in runs.items():
            d = out / "target" / name
            text = transfer_run_csv(r.stats) if r.variant else episodes_csv(r.stats)
            atomic_write_text(d / ("transfer_run.csv" if r.variant else "episodes.csv"), text)
            atomic_write_text(d / "checkpoint.json",
                              dumps_checkpoint(r.params, extra={"featurizer": fz.to_dict(),
                                                                "window_key": cfg.model.window_key,
                                                                "name": name}))
    for name, r in runs.items():
        say(f"{name}: F={metrics(r.counts).f_score:.4f} final-10 reward {r.final_mean():.2f}")

    summary = build_summary(cfg, data, sources, trust, runs)
    if out is not None:
        write_json(out / "summary.json", summary)
        write_json(out / "timings.json", {k: round(v, 3) for k, v in timings.items()})
    return ScenarioResult(cfg, data, sources, trust, runs, summary, timings)


def build_summary(cfg: ScenarioConfig, data: ScenarioData, sources: dict[str, SourceRun],
                  trust: dict[str, TrustReport], runs: dict[str, TargetRun]) -> dict:
    """Deterministic result digest: no paths, no wall-clock."""
    base = runs["baseline"].returns
    rows = []
    for name, r in runs.items():
        m = metrics(r.counts)
        row = {
            "name": name,
            "label": r.label(),
            "adversary": r.variant.adversary if r.variant else None,
            "t_th": r.variant.t_th if r.variant else None,
            "selected_sources": r.selected,
            "metrics": m.as_dict(),
            "best_return": float(r.returns.max()),
            "final10_mean_return": r.final_mean(10),
            "final_quartile_mean_return": final_quartile_mean(r.stats),
            "episodes": len(r.stats),
        }
        if r.variant is not None:
            row["time_to_baseline_best"] = time_to_baseline(base, r.returns)
            row["selection"] = r.selection
            row["collected"] = r.collected
        rows.append(row)
    return {
        "schema": SUMMARY_SCHEMA,
        "version": SUMMARY_VERSION,
        "scenario": cfg.scenario,
        "case": cfg.case or None,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "data": data.manifest(),
        "sources": {
            key: {
                "name": s.policy.name,
                "adversary": s.kind,
                "episodes": len(s.stats),
                "final_quartile_mean_reward": s.final_quartile_reward(),
                "attack": s.manifest.to_dict(),
            }
            for key, s in sources.items()
        },
        "trust": {k: v.to_dict() for k, v in trust.items()},
        "runs": rows,
    }


def load_summary(path) -> dict:
    doc = read_json(path)
    if doc.get("schema") != SUMMARY_SCHEMA:
        raise ValueError(f"{path}: not a scenario summary")
    if doc.get("version") != SUMMARY_VERSION:
        raise ValueError(f"{path}: unsupported summary version {doc.get('version')}")
    return doc
