"""
Sweep and ablation reporting.

This module provides:
- SweepRow and the long-format sweep CSV (`setting,alpha,seed,variant,metric,value,status`)
- ExperimentReport tables with text/CSV/JSON export
- Static metric-vs-alpha and metric-vs-value plots (matplotlib, Agg backend)
"""

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from statistics import median
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

logger = logging.getLogger(__name__)

SWEEP_HEADER = ["setting", "alpha", "seed", "variant", "metric", "value", "status"]


@dataclass
class SweepRow:
    """One metric of one (setting, alpha, seed, variant) cell."""
    setting: str
    alpha: float
    seed: int
    variant: str
    metric: str
    value: Optional[float]
    status: str = "ok"

    def as_csv(self) -> List[str]:
        value = "" if self.value is None else repr(float(self.value))
        return [self.setting, repr(float(self.alpha)), str(self.seed), self.variant, self.metric, value, self.status]


def write_long_csv(rows: Iterable[SweepRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow(row.as_csv())
    return path


def read_long_csv(path: Union[str, Path]) -> List[SweepRow]:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for record in csv.DictReader(f):
            rows.append(SweepRow(
                setting=record["setting"],
                alpha=float(record["alpha"]),
                seed=int(record["seed"]),
                variant=record["variant"],
                metric=record["metric"],
                value=float(record["value"]) if record["value"] else None,
                status=record["status"],
            ))
    return rows


def aggregate(rows: Sequence[SweepRow], metric: str) -> Dict[str, Dict[str, Dict[float, float]]]:
    """
    Median over seeds of ``metric``, grouped as setting -> variant -> alpha.

    Failed cells and missing values are left out.
    """
    buckets: Dict[tuple, List[float]] = defaultdict(list)
    for row in rows:
        if row.metric != metric or row.status != "ok" or row.value is None or math.isnan(row.value):
            continue
        buckets[(row.setting, row.variant, row.alpha)].append(row.value)
    out: Dict[str, Dict[str, Dict[float, float]]] = defaultdict(lambda: defaultdict(dict))
    for (setting, variant, alpha), values in sorted(buckets.items()):
        out[setting][variant][alpha] = median(values)
    return out


@dataclass
class ExperimentReport:
    """A titled table of results."""
    title: str
    headers: List[str]
    rows: List[List[str]]
    summary: Optional[str] = None

    def to_table_string(self) -> str:
        if not self.rows:
            return f"{self.title}\n{'=' * len(self.title)}\nNo data available.\n"
        widths = [
            max(len(h), max(len(str(r[i])) for r in self.rows), 6)
            for i, h in enumerate(self.headers)
        ]
        lines = [self.title, "=" * len(self.title), ""]
        header = " | ".join(h.ljust(w) for h, w in zip(self.headers, widths))
        lines.extend([header, "-" * len(header)])
        for row in self.rows:
            lines.append(" | ".join(str(c).ljust(w) for c, w in zip(row, widths)))
        if self.summary:
            lines.extend(["", self.summary])
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = [f"# {self.title}", ",".join(self.headers)]
        lines.extend(",".join(str(c) for c in row) for row in self.rows)
        return "\n".join(lines)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def sweep_table(rows: Sequence[SweepRow], metric: str = "acer") -> ExperimentReport:
    """Median ``metric`` per (setting, variant) across alphas, as a table."""
    grouped = aggregate(rows, metric)
    alphas = sorted({r.alpha for r in rows})
    table_rows = []
    for setting in sorted(grouped):
        for variant in sorted(grouped[setting]):
            values = grouped[setting][variant]
            table_rows.append([setting, variant] + [
                f"{values[a] * 100:.2f}" if a in values else "-" for a in alphas
            ])
    failed = sum(1 for r in rows if r.status != "ok" and r.metric == metric)
    summary = f"{metric.upper()} (%) median over seeds; {failed} failed cell(s)" if failed else \
        f"{metric.upper()} (%) median over seeds"
    return ExperimentReport(
        title=f"{metric.upper()} vs alpha",
        headers=["setting", "variant"] + [f"a={a:g}" for a in alphas],
        rows=table_rows,
        summary=summary,
    )


def plot_sweep(rows: Sequence[SweepRow], metric: str, out_dir: Union[str, Path]) -> List[Path]:
    """
    One line plot per setting: median ``metric`` vs alpha, one line per variant.

    Returns:
        Paths of the written PNG files
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for setting, variants in sorted(aggregate(rows, metric).items()):
        fig, ax = plt.subplots(figsize=(6, 4))
        for variant, points in sorted(variants.items()):
            xs = sorted(points)
            ax.plot(xs, [points[x] * 100 for x in xs], marker="o", label=variant)
        ax.set_xlabel("missing-modality ratio alpha")
        ax.set_ylabel(f"{metric.upper()} (%)")
        ax.set_title(setting)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{setting}_{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def ablation_value(variant: str) -> Optional[float]:
    """Parameter value of an ablation variant label such as ``theta=0.5``."""
    _, sep, value = variant.partition("=")
    if not sep:
        return None
    try:
        return float(value)
    except ValueError:
        return None


def plot_ablation(rows: Sequence[SweepRow], param: str, metric: str, path: Union[str, Path]) -> Optional[Path]:
    """Median ``metric`` vs the ablated parameter value, one line per setting."""
    series: Dict[str, Dict[float, List[float]]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        x = ablation_value(row.variant)
        if row.metric != metric or row.status != "ok" or row.value is None or x is None:
            continue
        series[row.setting][x].append(row.value)
    if not series:
        logger.warning("No successful ablation cells to plot for %s", param)
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for setting, points in sorted(series.items()):
        xs = sorted(points)
        ax.plot(xs, [median(points[x]) * 100 for x in xs], marker="o", label=setting)
    ax.set_xlabel(param)
    ax.set_ylabel(f"{metric.upper()} (%)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


class ReportExporter:
    """Exports ExperimentReports as text, CSV or JSON."""

    @staticmethod
    def export_to_file(report: ExperimentReport, filename: Union[str, Path], format: str = "auto") -> bool:
        """
        Export a report to a file.

        Args:
            report: Report to export
            filename: Output file
            format: "txt", "csv", "json" or "auto" (from the suffix)

        Returns:
            True if the export succeeded
        """
        filename = Path(filename)
        if format == "auto":
            format = {".csv": "csv", ".json": "json"}.get(filename.suffix.lower(), "txt")
        if format == "csv":
            content = report.to_csv()
        elif format == "json":
            content = json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)
        else:
            content = report.to_table_string()
        try:
            filename.parent.mkdir(parents=True, exist_ok=True)
            filename.write_text(content + "\n", encoding="utf-8")
            return True
        except OSError as e:
            logger.warning("Error exporting report to %s: %s", filename, e)
            return False
