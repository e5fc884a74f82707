"""Metric report rendering: aligned text table, TSV, and bar-chart figures."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .evaluation import CUTOFFS, METRICS, MetricsReport


def metric_rows() -> list[str]:
    return [f"{name}@{k}" for k in CUTOFFS for name in METRICS]


def format_metrics_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned text table: one metric per row, one variant per column."""
    if not reports:
        raise ValueError("nothing to report")
    headers = [""] + [f"{r.variant} (n={r.num_users})" for r in reports]
    rows = [
        [name] + [f"{r.values[name]:.4f}" for r in reports]
        for name in metric_rows()
    ]
    widths = [max(len(str(cell)) for cell in col) for col in zip(headers, *rows)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(headers, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def format_metrics_tsv(reports: Sequence[MetricsReport]) -> str:
    lines = ["metric\t" + "\t".join(r.variant for r in reports)]
    for name in metric_rows():
        lines.append(name + "\t" + "\t".join(f"{r.values[name]:.6f}" for r in reports))
    return "\n".join(lines) + "\n"


def render_metrics_figure(reports: Sequence[MetricsReport], path: str | Path) -> None:
    """Grouped bar chart of every metric@K per variant, written to `path`."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    names = metric_rows()
    x = np.arange(len(names))
    width = 0.8 / max(1, len(reports))
    fig, ax = plt.subplots(figsize=(10, 4.5))
    for i, report in enumerate(reports):
        values = [report.values[name] for name in names]
        ax.bar(x + i * width, values, width, label=report.variant)
    ax.set_xticks(x + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("score")
    ax.set_title("Ranking metrics by variant")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "kgrec"})
    plt.close(fig)


def write_report_files(reports: Sequence[MetricsReport], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    table = out / "metrics_table.txt"
    table.write_text(format_metrics_table(reports), encoding="utf-8")
    written.append(table)
    tsv = out / "metrics.tsv"
    tsv.write_text(format_metrics_tsv(reports), encoding="utf-8")
    written.append(tsv)
    figure = out / "metrics.png"
    render_metrics_figure(reports, figure)
    written.append(figure)
    return written
