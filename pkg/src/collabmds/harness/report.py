"""Human-readable report and plot-data CSVs for a finished scenario bundle."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

from ..io import atomic_write_text
from ..trace import ConfusionCounts
from .metrics import metrics
from .scenarios import SUMMARY_SCHEMA, SUMMARY_VERSION, load_summary

RUN_FIELDS = ("name", "label", "metrics", "best_return", "final10_mean_return", "episodes")
COUNT_FIELDS = ("tp", "tn", "fp", "fn")


class IncompleteBundleError(ValueError):
    """Raised with one line per missing piece of a result bundle."""

    def __init__(self, problems: list[str]):
        super().__init__("incomplete result bundle:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = problems


@dataclass
class Report:
    text: str
    files: dict[str, str] = field(default_factory=dict)  # relative name -> contents


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def run_curve_path(bundle: Path, run: dict) -> Path:
    name = "transfer_run.csv" if run.get("adversary") is not None else "episodes.csv"
    return bundle / "target" / run["name"] / name


def check_bundle(bundle, summary: dict | None = None) -> list[str]:
    """List everything a report needs that the bundle lacks."""
    bundle = Path(bundle)
    problems = []
    if summary is None:
        path = bundle / "summary.json"
        if not path.exists():
            return [f"summary.json: missing in {bundle}"]
        try:
            summary = load_summary(path)
        except ValueError as exc:
            return [f"summary.json: {exc}"]
    if summary.get("schema") != SUMMARY_SCHEMA:
        problems.append("summary.schema: missing or wrong")
    if summary.get("version") != SUMMARY_VERSION:
        problems.append("summary.version: missing or unsupported")
    runs = summary.get("runs")
    if not isinstance(runs, list) or not runs:
        problems.append("summary.runs: missing or empty")
        return problems
    if runs[0].get("name") != "baseline":
        problems.append("summary.runs[0]: the baseline run must come first")
    for i, run in enumerate(runs):
        tag = f"summary.runs[{i}]"
        for f in RUN_FIELDS:
            if f not in run:
                problems.append(f"{tag}.{f}: missing")
        m = run.get("metrics", {})
        for f in COUNT_FIELDS:
            if f not in m:
                problems.append(f"{tag}.metrics.{f}: missing")
        if run.get("adversary") is not None and "time_to_baseline_best" not in run:
            problems.append(f"{tag}.time_to_baseline_best: missing")
        if "name" in run and not run_curve_path(bundle, run).exists():
            problems.append(f"{run_curve_path(bundle, run).relative_to(bundle)}: missing")
    return problems


def read_curve(path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(r["cumulative_reward"]) for r in csv.DictReader(fh)]


def table3_rows(summary: dict) -> list[list]:
    """Detection metrics per run, recomputed from the stored confusion counts."""
    rows = [["run", "label", "accuracy", "precision", "recall", "f_score", *COUNT_FIELDS]]
    for run in summary["runs"]:
        c = ConfusionCounts(**{k: int(run["metrics"][k]) for k in COUNT_FIELDS})
        m = metrics(c)
        rows.append([run["name"], run["label"], f"{m.accuracy:.4f}", f"{m.precision:.4f}",
                     f"{m.recall:.4f}", f"{m.f_score:.4f}", c.tp, c.tn, c.fp, c.fn])
    return rows


def table2_rows(summary: dict) -> list[list]:
    """Episodes each transfer run needed to reach the baseline's best return."""
    base = summary["runs"][0]
    rows = [["run", "label", "baseline_best_return", "episode_reached", "budget", "reduction"]]
    rows.append([base["name"], base["label"], base["best_return"], "", base["episodes"], ""])
    for run in summary["runs"][1:]:
        t = run["time_to_baseline_best"]
        reached = "" if t["episode"] is None else t["episode"]
        red = "" if t["reduction"] is None else f"{t['reduction']:.4f}"
        rows.append([run["name"], run["label"], t["baseline_best"], reached, t["budget"], red])
    return rows


def curves_rows(curves: dict[str, list[float]]) -> list[list]:
    """Wide learning-curve table: one row per episode, one column per run."""
    names = list(curves)
    n = max((len(v) for v in curves.values()), default=0)
    rows = [["episode", *names]]
    for ep in range(n):
        rows.append([ep + 1, *(curves[k][ep] if ep < len(curves[k]) else "" for k in names)])
    return rows


def render_text(summary: dict) -> str:
    lines = [f"scenario {summary['scenario']}"
             + (f" ({summary['case']})" if summary.get("case") else "")
             + f", seed {summary['seed']}", ""]
    trust = summary.get("trust", {})
    if trust:
        lines.append("Source trust (raw probe return / scaled / selected)")
        for variant, rep in trust.items():
            cells = ", ".join(f"{s['name']} {s['raw_return']:.1f}/{s['scaled']:.3f}/{'y' if s['selected'] else 'n'}"
                              for s in rep["sources"])
            lines.append(f"  {variant}: {cells}")
        lines.append("")
    t3 = table3_rows(summary)
    lines.append("Detection on the test set")
    lines.append(f"  {'run':<16}{'label':<46}{'A':>8}{'P':>8}{'R':>8}{'F':>8}")
    for r in t3[1:]:
        lines.append(f"  {r[0]:<16}{r[1]:<46}{r[2]:>8}{r[3]:>8}{r[4]:>8}{r[5]:>8}")
    lines.append("")
    t2 = table2_rows(summary)
    lines.append(f"Episodes to reach the baseline's best return ({t2[1][2]:g})")
    for r in t2[2:]:
        reached = "not reached" if r[3] == "" else f"episode {r[3]} of {r[4]}, reduction {float(r[5]):.1%}"
        lines.append(f"  {r[0]:<16}{reached}")
    if len(t2) == 2:
        lines.append("  (no transfer runs)")
    return "\n".join(lines) + "\n"


def build_report(bundle) -> Report:
    """Read a bundle directory and produce the report files without writing them."""
    bundle = Path(bundle)
    problems = check_bundle(bundle)
    if problems:
        raise IncompleteBundleError(problems)
    summary = load_summary(bundle / "summary.json")
    curves = {run["name"]: read_curve(run_curve_path(bundle, run)) for run in summary["runs"]}
    for run in summary["runs"]:
        if len(curves[run["name"]]) != run["episodes"]:
            raise IncompleteBundleError(
                [f"{run_curve_path(bundle, run).relative_to(bundle)}: {len(curves[run['name']])} rows, "
                 f"expected {run['episodes']}"])
    src_curves = {}
    for key in summary.get("sources", {}):
        p = bundle / "sources" / key.replace(":", "-") / "episodes.csv"
        if p.exists():
            src_curves[key] = read_curve(p)
    files = {
        "curves.csv": _csv(curves_rows(curves)),
        "table3.csv": _csv(table3_rows(summary)),
        "table2.csv": _csv(table2_rows(summary)),
    }
    if src_curves:
        files["source_curves.csv"] = _csv(curves_rows(src_curves))
    text = render_text(summary)
    files["report.txt"] = text
    return Report(text, files)


def write_report(bundle, out_dir=None) -> Report:
    rep = build_report(bundle)
    out = Path(out_dir) if out_dir is not None else Path(bundle) / "report"
    for name, text in rep.files.items():
        atomic_write_text(out / name, text)
    return rep
