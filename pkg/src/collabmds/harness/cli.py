"""Command-line entry point.

Every subcommand writes into ``--out``; failures exit with the code of the
stage that broke (see ``STAGES``) and a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..adversary import FlipConfig, InductionConfig
from ..agent import DQNAgent, episodes_csv, evaluate
from ..features import encode_trace
from ..ingest import FieldMapping, IngestError, SplitPlan, parse_dataset, split_by_time, split_manifest
from ..io import atomic_write_text, load_toml, read_json, write_json
from ..synth import GenConfig, InfeasibleConfigError, export_veremi, generate_with_truth
from ..trace import read_trace, write_trace
from ..transfer import SourceData, SourcePolicy, TrustReport, train_target, transfer_run_csv
from .config import ADVERSARIES, SCENARIOS, ConfigError, ScenarioConfig, derive_seed
from .metrics import metrics
from .report import IncompleteBundleError, write_report
from .scenarios import (
    STAGES, StageError, SourceRun, fit_featurizer, load_policy, network_spec, rank_pool, run_scenario,
    save_policy, train_source, transfer_config,
)

log = logging.getLogger("collabmds")


def _scenario_config(args) -> ScenarioConfig:
    cfg = ScenarioConfig.from_toml(args.config) if args.config else ScenarioConfig()
    return cfg.with_overrides(scenario=getattr(args, "scenario", None), seed=args.seed,
                              t_th=getattr(args, "tth", None), adversary=getattr(args, "adversary", None))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    d = {}
    if args.config:
        doc = load_toml(args.config)
        d = doc.get("gen", doc)
    try:
        cfg = GenConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise StageError("config", str(exc)) from exc
    if args.seed is not None:
        cfg.rng_seed = args.seed
    try:
        res = generate_with_truth(cfg)
    except InfeasibleConfigError as exc:
        raise StageError("data", str(exc)) from exc
    out = _out(args)
    write_trace(out / "trace.csv", res.records)
    write_json(out / "manifest.json", {"config": cfg.to_dict(), **res.manifest()})
    if args.veremi:
        export_veremi(res, out / "veremi")
    print(f"{len(res.records)} messages -> {out / 'trace.csv'}")
    return 0


def cmd_ingest(args) -> int:
    mapping = FieldMapping.from_toml(args.mapping) if args.mapping else FieldMapping()
    try:
        records, report = parse_dataset(args.logs, args.ground_truth, mapping)
    except (IngestError, OSError, ValueError) as exc:
        raise StageError("data", str(exc)) from exc
    out = _out(args)
    write_trace(out / "trace.csv", records)
    write_json(out / "parse_report.json", report.as_dict())
    if args.split:
        fractions = tuple(float(x) for x in args.split.split(","))
        roles = tuple(args.roles.split(",")) if args.roles else ()
        try:
            parts = split_by_time(records, SplitPlan(fractions, roles))
        except (IngestError, ValueError) as exc:
            raise StageError("data", str(exc)) from exc
        files = {}
        for role, recs in parts.items():
            files[role] = f"{role}.csv"
            write_trace(out / files[role], recs)
        write_json(out / "split_manifest.json", split_manifest(parts, files))
    print(f"{len(records)} records kept, {report.n_skipped} skipped")
    return 0


def cmd_train_source(args) -> int:
    cfg = _scenario_config(args)
    records = read_trace(args.trace)
    kind = args.adversary or "none"
    name = args.name
    src = train_source(name, records, features=cfg.source_features(), spec_of=lambda d: network_spec(cfg, d),
                       agent_config=cfg.agent, n_episodes=cfg.budget.source_episodes,
                       seed=derive_seed(cfg.seed, "source", name), kind=kind,
                       flip=FlipConfig(cfg.flip.zeta, derive_seed(cfg.seed, "flip")),
                       induction=InductionConfig(cfg.induction.epsilon, cfg.induction.replica_fraction,
                                                 cfg.induction.adversary_episodes,
                                                 derive_seed(cfg.seed, "induction")),
                       window_key=cfg.model.window_key, iat_fill=cfg.model.iat_fill)
    out = _out(args)
    _save_source(out, src)
    print(f"source {name} ({kind}): final-quartile reward {src.final_quartile_reward():.2f}")
    return 0


def _save_source(out: Path, src: SourceRun) -> None:
    save_policy(out / "checkpoint.json", src.policy, {"adversary": src.kind})
    write_trace(out / "records.csv", src.records)
    atomic_write_text(out / "episodes.csv", episodes_csv(src.stats))
    write_json(out / "attack_manifest.json", src.manifest.to_dict())


def _load_sources(dirs) -> list[SourceRun]:
    out = []
    for d in dirs:
        d = Path(d)
        policy, extra = load_policy(d / "checkpoint.json")
        out.append(SourceRun(policy, extra.get("adversary", "none"), read_trace(d / "records.csv"), [], None))
    return out


def cmd_rank_sources(args) -> int:
    cfg = _scenario_config(args)
    t_th = args.tth if args.tth is not None else 0.8
    try:
        pool = _load_sources(args.source)
    except (OSError, ValueError, KeyError) as exc:
        raise StageError("rank", f"cannot load sources: {exc}") from exc
    report = rank_pool(pool, read_trace(args.probe), cfg, t_th)
    report.seeds = {"seed": cfg.seed}
    out = _out(args)
    write_json(out / "trust_report.json", report.to_dict())
    for e in report.ranked():
        print(f"{e.rank}. {e.name}: return {e.raw_return:.1f}, trust {e.scaled:.3f}, "
              f"{'selected' if e.selected else 'rejected'}")
    return 0


def cmd_train_target(args) -> int:
    cfg = _scenario_config(args)
    train_recs = read_trace(args.trace)
    fz = fit_featurizer(train_recs, cfg.target_features(), cfg.model.iat_fill)
    spec = network_spec(cfg, fz.n_features_out_)
    sources: list[SourceData] = []
    t_th = args.tth if args.tth is not None else 0.8
    if args.trust:
        report = TrustReport.from_dict(read_json(args.trust))
        pool = {s.policy.name: s for s in _load_sources(args.source or [])}
        for e in report.entries:
            if e.scaled >= t_th:
                if e.name not in pool:
                    raise StageError("target", f"trusted source {e.name} was not given with --source")
                sources.append(SourceData(pool[e.name].policy, pool[e.name].records, e.scaled))
    agent = DQNAgent(spec, cfg.agent, seed=derive_seed(cfg.seed, "target"))
    train = encode_trace(fz, train_recs, spec.window, cfg.model.window_key)
    res = train_target(agent, train, sources, transfer_config(cfg, t_th), cfg.budget.target_episodes, fz)
    out = _out(args)
    atomic_write_text(out / "transfer_run.csv", transfer_run_csv(res.stats))
    save_policy(out / "checkpoint.json", SourcePolicy("target", agent.params, fz, cfg.model.window_key))
    doc = {"sources": [s.policy.name for s in sources], "selection": res.log.as_dict(),
           "collected": res.collected, "shortfalls": res.shortfalls}
    if args.test:
        test = encode_trace(fz, read_trace(args.test), spec.window, cfg.model.window_key)
        m = metrics(evaluate(agent.params, test))
        doc["metrics"] = m.as_dict()
        print(f"test F-score {m.f_score:.4f}")
    write_json(out / "target_run.json", doc)
    return 0


def cmd_run_scenario(args) -> int:
    cfg = _scenario_config(args)
    run_scenario(cfg, args.out, progress=log.info)
    try:
        rep = write_report(args.out)
    except IncompleteBundleError as exc:
        raise StageError("report", str(exc)) from exc
    print(rep.text, end="")
    return 0


def cmd_report(args) -> int:
    try:
        rep = write_report(args.out)
    except IncompleteBundleError as exc:
        raise StageError("report", str(exc)) from exc
    print(rep.text, end="")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collabmds", description="Collaborative DRL misbehavior detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("--out", required=out_required, help="output directory")

    def scenario_flags(sp):
        sp.add_argument("--scenario", choices=SCENARIOS)
        sp.add_argument("--tth", type=float, help="trust threshold")
        sp.add_argument("--adversary", choices=ADVERSARIES)

    sp = sub.add_parser("gen", help="synthesize a labeled BSM trace")
    common(sp)
    sp.add_argument("--veremi", action="store_true", help="also export VeReMi-style JSON logs")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("ingest", help="parse VeReMi-style logs into a canonical trace")
    common(sp)
    sp.add_argument("--logs", required=True, help="directory of reception logs")
    sp.add_argument("--ground-truth", required=True, help="ground-truth JSON lines file")
    sp.add_argument("--mapping", help="TOML field mapping")
    sp.add_argument("--split", help="comma-separated time-split fractions")
    sp.add_argument("--roles", help="comma-separated names for the split parts")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train-source", help="train one source RSU agent")
    common(sp)
    scenario_flags(sp)
    sp.add_argument("--trace", required=True, help="training trace CSV")
    sp.add_argument("--name", default="source", help="source name")
    sp.set_defaults(func=cmd_train_source)

    sp = sub.add_parser("rank-sources", help="probe and rank trained sources")
    common(sp)
    scenario_flags(sp)
    sp.add_argument("--source", action="append", required=True, help="train-source output directory")
    sp.add_argument("--probe", required=True, help="target probe trace CSV")
    sp.set_defaults(func=cmd_rank_sources)

    sp = sub.add_parser("train-target", help="train the target agent, with or without transfer")
    common(sp)
    scenario_flags(sp)
    sp.add_argument("--trace", required=True, help="target training trace CSV")
    sp.add_argument("--test", help="target test trace CSV")
    sp.add_argument("--trust", help="trust_report.json from rank-sources; omit for the baseline")
    sp.add_argument("--source", action="append", help="train-source output directory")
    sp.set_defaults(func=cmd_train_target)

    sp = sub.add_parser("run-scenario", help="run a full SC1/SC2/SC3 scenario")
    common(sp)
    scenario_flags(sp)
    sp.set_defaults(func=cmd_run_scenario)

    sp = sub.add_parser("report", help="render tables and curve CSVs for a finished bundle")
    common(sp)
    sp.set_defaults(func=cmd_report)
    return p


# stage charged with an unexpected failure inside each subcommand
COMMAND_STAGE = {"gen": "data", "ingest": "data", "train-source": "source", "rank-sources": "rank",
                 "train-target": "target", "run-scenario": "target", "report": "report"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return STAGES["config"]
    except Exception as exc:  # noqa: BLE001 - reported with the stage code
        stage = COMMAND_STAGE[args.command]
        print(f"error: [{stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return STAGES[stage]


if __name__ == "__main__":
    sys.exit(main())
