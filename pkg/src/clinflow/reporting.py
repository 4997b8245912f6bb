"""Report rendering: score table, per-case CSV, propagation CSV, and figures.

The report directory holds both delimited output (CSV, JSON) and rendered
matplotlib figures so results can be read by machines and humans alike.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import StorageError
from .metrics import COLUMN_TITLES, PROPAGATION_STAGES, SCORE_COLUMNS, ScoreReport


def _format_value(value: float | None) -> str:
    return f"{value:.4f}" if value is not None else "absent"


def render_table(report: ScoreReport) -> str:
    """Fixed-width table: the six stage columns plus the overall average."""
    headers = [COLUMN_TITLES[c] for c in SCORE_COLUMNS] + ["Average"]
    values = [_format_value(report.column_means[c]) for c in SCORE_COLUMNS]
    values.append(f"{report.overall:.4f}")
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    header_line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    value_line = "  ".join(v.ljust(w) for v, w in zip(values, widths))
    rule = "-" * len(header_line)
    lines = [header_line, rule, value_line, "", f"Cases scored: {len(report.per_case)}"]
    for flag in report.flags:
        lines.append(f"note: {flag}")
    return "\n".join(lines) + "\n"


def propagation_csv(report: ScoreReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["stage", "cumulative_correct", "threshold"])
    for stage, count in zip(PROPAGATION_STAGES, report.propagation):
        writer.writerow([stage, count, report.thresholds[stage]])
    return buffer.getvalue()


def per_case_csv(report: ScoreReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["case_id", *SCORE_COLUMNS])
    for case_scores in report.per_case:
        row = [case_scores.case_id]
        for column in SCORE_COLUMNS:
            score = case_scores.scores[column]
            row.append("vacuous" if score.vacuous else f"{score.value:.6f}")
        writer.writerow(row)
    return buffer.getvalue()


def _scores_figure(report: ScoreReport, path: Path) -> None:
    labels = [COLUMN_TITLES[c] for c in SCORE_COLUMNS]
    values = [report.column_means[c] if report.column_means[c] is not None else 0.0
              for c in SCORE_COLUMNS]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    bars = ax.bar(range(len(labels)), values, color="#4878a8")
    ax.axhline(report.overall, color="#c44e52", linestyle="--", linewidth=1.2,
               label=f"Average {report.overall:.3f}")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("Mean score")
    ax.set_title("Stage scores")
    for bar, value in zip(bars, values):
        ax.annotate(f"{value:.3f}", (bar.get_x() + bar.get_width() / 2, value),
                    ha="center", va="bottom", fontsize=8)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _propagation_figure(report: ScoreReport, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    positions = range(1, len(PROPAGATION_STAGES) + 1)
    ax.plot(positions, report.propagation, marker="o", color="#4878a8")
    for x, count in zip(positions, report.propagation):
        ax.annotate(str(count), (x, count), textcoords="offset points", xytext=(0, 6),
                    ha="center", fontsize=9)
    ax.set_xticks(list(positions))
    ax.set_xticklabels(PROPAGATION_STAGES, rotation=15, ha="right")
    ax.set_ylabel("Cases still correct")
    ax.set_title("Cumulative correctness across stages")
    ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


REPORT_FILES = (
    "report.txt",
    "report.json",
    "propagation.csv",
    "scores.csv",
    "scores_by_stage.png",
    "propagation.png",
)


def write_report(report: ScoreReport, out_dir: str | Path, force: bool = False,
                 figures: bool = True) -> list[Path]:
    """Write the full report bundle into a directory; refuses to overwrite without force."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = [out_dir / name for name in REPORT_FILES]
    if not force:
        existing = [p for p in targets if p.exists()]
        if existing:
            raise StorageError(
                f"report files already exist (use --force): {', '.join(str(p) for p in existing)}"
            )
    written = []
    (out_dir / "report.txt").write_text(render_table(report), encoding="utf-8")
    written.append(out_dir / "report.txt")
    (out_dir / "report.json").write_text(
        json.dumps(report.as_dict(), ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    written.append(out_dir / "report.json")
    (out_dir / "propagation.csv").write_text(propagation_csv(report), encoding="utf-8")
    written.append(out_dir / "propagation.csv")
    (out_dir / "scores.csv").write_text(per_case_csv(report), encoding="utf-8")
    written.append(out_dir / "scores.csv")
    if figures:
        _scores_figure(report, out_dir / "scores_by_stage.png")
        written.append(out_dir / "scores_by_stage.png")
        _propagation_figure(report, out_dir / "propagation.png")
        written.append(out_dir / "propagation.png")
    return written
