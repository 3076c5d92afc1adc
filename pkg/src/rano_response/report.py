"""Study report: per-axis box plots, p-value table and winner summary.

Everything rendered here is read from persisted records and statistics.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

from .evaluation import METRIC_NAMES
from .evaluation.stats import ALPHA
from .runner import AXIS_ORDER, AxisStat, ExperimentRecord, RecordStore, load_stats

METRIC_TITLES = {
    "balanced_accuracy": "Balanced Accuracy",
    "f1": "F1-score",
    "precision": "Precision",
    "recall": "Recall",
}


def format_p(p: float | None, markdown: bool = True) -> str:
    if p is None:
        return ""
    text = f"{p:.4f}" if p >= 1e-4 else f"{p:.1e}"
    return f"**{text}**" if markdown and p < ALPHA else text


def pvalue_rows(stats: Sequence[AxisStat]) -> list[dict]:
    """One row per (axis, test, group pair) with a p-value per metric."""
    rows: dict[tuple, dict] = {}
    for s in stats:
        groups = " vs ".join(s.result.groups) if s.result.test.value != "KruskalWallis" else "all options"
        key = (s.axis, s.result.test.value, groups)
        row = rows.setdefault(key, {"axis": s.axis, "test": s.result.test.value, "groups": groups,
                                    **{m: None for m in METRIC_NAMES}})
        row[s.metric] = s.result.p_value
    axis_rank = {a.value: i for i, a in enumerate(AXIS_ORDER)}
    test_rank = {"MannWhitneyU": 0, "KruskalWallis": 1, "DunnPosthoc": 2}
    return sorted(rows.values(), key=lambda r: (axis_rank.get(r["axis"], 99), test_rank[r["test"]], r["groups"]))


def write_pvalue_tables(stats: Sequence[AxisStat], out_dir: Path) -> tuple[Path, Path]:
    rows = pvalue_rows(stats)
    tsv = out_dir / "pvalues.tsv"
    with tsv.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["axis", "test", "groups", *METRIC_NAMES])
        for r in rows:
            w.writerow([r["axis"], r["test"], r["groups"], *(format_p(r[m], markdown=False) for m in METRIC_NAMES)])
    md = out_dir / "pvalues.md"
    lines = [
        "| Axis | Test | Groups | " + " | ".join(METRIC_TITLES[m] for m in METRIC_NAMES) + " |",
        "|---|---|---|" + "---|" * len(METRIC_NAMES),
    ]
    for r in rows:
        lines.append(f"| {r['axis']} | {r['test']} | {r['groups']} | " + " | ".join(format_p(r[m]) for m in METRIC_NAMES) + " |")
    if not rows:
        lines.append("| (no statistical tests recorded) | | |" + " |" * len(METRIC_NAMES))
    lines.append("")
    lines.append(f"Bold: p < {ALPHA}.")
    md.write_text("\n".join(lines) + "\n")
    return tsv, md


def _fold_values(records: Sequence[ExperimentRecord], axis: str) -> dict[str, dict[str, list[float]]]:
    out: dict[str, dict[str, list[float]]] = {}
    for r in sorted(records, key=lambda r: r.fold):
        if r.axis != axis or r.status != "complete" or r.metrics is None:
            continue
        per = out.setdefault(r.option, {m: [] for m in METRIC_NAMES})
        for m in METRIC_NAMES:
            per[m].append(getattr(r.metrics, m))
    return out


def plot_axis(records: Sequence[ExperimentRecord], axis: str, options: Sequence[str], path: Path) -> Path | None:
    """Four panels (one per metric) of fold-value box plots per option."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = _fold_values(records, axis)
    if not values:
        return None
    shown = [o for o in options if o in values] + [o for o in values if o not in options]
    fig, axes = plt.subplots(1, len(METRIC_NAMES), figsize=(4 * len(METRIC_NAMES), 4), squeeze=False)
    for ax, m in zip(axes[0], METRIC_NAMES):
        data = [values[o][m] for o in shown]
        ax.boxplot(data, showmeans=False)
        ax.set_xticks(range(1, len(shown) + 1))
        ax.set_xticklabels(shown, rotation=30, ha="right", fontsize=8)
        ax.set_title(METRIC_TITLES[m], fontsize=10)
        ax.set_ylim(-0.02, 1.02)
        missing = [o for o in options if o not in values]
        if missing:
            ax.text(0.02, 0.02, "no data: " + ", ".join(missing), transform=ax.transAxes, fontsize=7, color="red")
    fig.suptitle(axis)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def build_report(study_dir: str | Path, out_dir: str | Path | None = None) -> dict:
    """Render tables, figures and a summary for a complete or partial study."""
    study_dir = Path(study_dir)
    out_dir = Path(out_dir) if out_dir else study_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = study_dir / "records.jsonl"
    records = RecordStore(records_path).records() if records_path.exists() else []
    stats = load_stats(study_dir / "stats.jsonl")
    summary_path = study_dir / "study_summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}

    write_pvalue_tables(stats, out_dir)
    chain = {c["axis"]: c for c in summary.get("winner_chain", [])}
    figures = []
    for axis in AXIS_ORDER:
        options = chain.get(axis.value, {}).get("options") or sorted({r.option for r in records if r.axis == axis.value})
        fig = plot_axis(records, axis.value, options, out_dir / f"boxplot_{axis.value}.png")
        if fig is not None:
            figures.append(str(fig))

    metrics_tsv = out_dir / "fold_metrics.tsv"
    with metrics_tsv.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["axis", "option", "fold", "status", *METRIC_NAMES, "config_hash", "checkpoint"])
        for r in sorted(records, key=lambda r: ([a.value for a in AXIS_ORDER].index(r.axis), r.option, r.fold)):
            vals = [f"{getattr(r.metrics, m):.4f}" if r.metrics else "" for m in METRIC_NAMES]
            w.writerow([r.axis, r.option, r.fold, r.status, *vals, r.config_hash, r.checkpoint or ""])

    lines = [f"# Study report: {summary.get('study', study_dir.name)}", ""]
    if not records:
        lines.append("No experiment records found; the study has not produced results yet.")
    if chain:
        lines += ["## Winner chain", ""]
        for axis in AXIS_ORDER:
            if axis.value in chain:
                lines.append(f"1. {axis.value}: **{chain[axis.value]['winner']}** (of {', '.join(chain[axis.value]['options'])})")
        lines.append("")
    else:
        done = sorted({r.axis for r in records}, key=lambda a: [x.value for x in AXIS_ORDER].index(a))
        if records:
            lines += [f"Study incomplete; axes with records: {', '.join(done)}.", ""]
    notes = {a: n for a, n in summary.get("incomplete", {}).items() if n}
    if notes:
        lines += ["## Incomplete options", ""]
        for axis, per in notes.items():
            for opt, note in per.items():
                lines.append(f"- {axis} / {opt}: {note}")
        lines.append("")
    if summary.get("final_model"):
        fm = summary["final_model"]
        lines += ["## Final model", "",
                  f"{fm['axis']} / {fm['option']} fold {fm['fold']}: balanced accuracy {fm['balanced_accuracy']:.4f}",
                  f"checkpoint: `{fm['checkpoint']}`", ""]
    explain_summary = study_dir / "explain" / "explain_summary.json"
    if explain_summary.exists():
        ex = json.loads(explain_summary.read_text())
        lines += [f"Attributions target the {ex['target_mode'].replace('_', ' ')} class; see `explain/`.", ""]
    lines += ["## Files", "", "- p-values: `pvalues.md`, `pvalues.tsv`", "- per-fold metrics: `fold_metrics.tsv`"]
    lines += [f"- figure: `{Path(f).name}`" for f in figures]
    (out_dir / "summary.md").write_text("\n".join(lines) + "\n")
    return {"records": len(records), "stats": len(stats), "figures": figures, "out_dir": str(out_dir)}
