"""Tab-separated and PNG renderings of evaluation reports and metric logs."""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_PNG_META = {"Software": None}


def report_rows(report):
    rows = []
    for tier in sorted(report["tiers"], key=int):
        t = report["tiers"][tier]
        rows.append((int(tier), t["episodes"], t["excluded"], t["mean_d_delta"], t["qa_accuracy"], t["timeouts"]))
    return rows


def write_report_tsv(report, path):
    lines = ["tier\tepisodes\texcluded\tmean_d_delta\tqa_accuracy\ttimeouts"]
    for row in report_rows(report):
        lines.append("\t".join("" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
    return path


def plot_report(report, path):
    rows = report_rows(report)
    tiers = [f"T-{r[0]}" for r in rows]
    dd = [r[3] or 0.0 for r in rows]
    acc = [r[4] or 0.0 for r in rows]
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(7, 3))
    a0.bar(tiers, dd, color="tab:blue")
    a0.set_title("mean d_delta")
    a0.axhline(0.0, color="k", lw=0.5)
    a1.bar(tiers, acc, color="tab:orange")
    a1.set_ylim(0, 1)
    a1.set_title("QA accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_metrics(metrics_path, path, key="loss"):
    """One line per stage of ``key`` against epoch from a JSON-lines log."""
    series = {}
    for line in Path(metrics_path).read_text().splitlines():
        row = json.loads(line)
        if key in row and row[key] is not None:
            series.setdefault(row.get("stage", "?"), []).append((row.get("epoch", 0), row[key]))
    fig, ax = plt.subplots(figsize=(5, 3))
    for stage, pts in sorted(series.items()):
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=stage)
    ax.set_xlabel("epoch")
    ax.set_ylabel(key)
    if series:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata=_PNG_META)
    plt.close(fig)
    return path
