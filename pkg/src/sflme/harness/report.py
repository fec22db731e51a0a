"""Median-over-seeds tables from one or more results.csv files.

``summary.csv`` columns, in this order: config_hash, mode, metric, N, then one
column per attack in the order craft, gan, gm, train, softtrain, naive
(empty where an attack was not run). Rows are ordered by config_hash, mode,
metric (queries_used, accuracy, fidelity, mi_mse, asr_fgsm, asr_pgd), then N.

``fidelity_vs_n.csv`` holds the plot series: config_hash, mode, attack, N,
fidelity.
"""

from __future__ import annotations

import csv
import statistics
from collections import defaultdict
from pathlib import Path

from ..attacks import METHODS
from .pipeline import COLUMNS

METRICS = ("queries_used", "accuracy", "fidelity", "mi_mse", "asr_fgsm", "asr_pgd")
SUMMARY_COLUMNS = ("config_hash", "mode", "metric", "N", *METHODS)
SERIES_COLUMNS = ("config_hash", "mode", "attack", "N", "fidelity")


class ReportError(ValueError):
    pass


def read_results(results_dir: str | Path) -> list[dict[str, str]]:
    root = Path(results_dir)
    files = [root] if root.is_file() else sorted(root.rglob("results.csv"))
    if not files:
        raise ReportError(f"no results.csv under {root}")
    rows = []
    for path in files:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != COLUMNS:
                raise ReportError(f"{path}: unexpected columns {header}")
            for line in reader:
                if len(line) != len(COLUMNS):
                    raise ReportError(f"{path}: row with {len(line)} fields, expected {len(COLUMNS)}")
                row = dict(zip(COLUMNS, line))
                if row["attack"] not in METHODS:
                    raise ReportError(f"{path}: unknown attack {row['attack']!r}")
                rows.append(row)
    return rows


def _fmt(metric: str, v: float) -> str:
    if metric == "queries_used" and v == int(v):
        return str(int(v))
    return f"{v:.4f}"


def medians(rows: list[dict[str, str]]) -> dict[tuple[str, str, str, int, str], float]:
    """(config_hash, mode, metric, N, attack) -> median over seeds; blank values are skipped."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        for metric in METRICS:
            if r[metric] != "":
                groups[(r["config_hash"], r["mode"], metric, int(r["N"]), r["attack"])].append(float(r[metric]))
    return {k: statistics.median(v) for k, v in groups.items()}


def _series_order(item) -> tuple:
    h, mode, _metric, n, attack = item[0]
    return h, mode, METHODS.index(attack), n


def report(results_dir: str | Path, out: str | Path | None = None) -> list[list[str]]:
    """Write summary.csv and fidelity_vs_n.csv; return the summary rows (without header)."""
    med = medians(read_results(results_dir))
    root = Path(results_dir)
    out = Path(out) if out is not None else (root.parent if root.is_file() else root)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted({k[:4] for k in med}, key=lambda k: (k[0], k[1], METRICS.index(k[2]), k[3]))
    summary = []
    for h, mode, metric, n in keys:
        cells = [_fmt(metric, med[(h, mode, metric, n, m)]) if (h, mode, metric, n, m) in med else "" for m in METHODS]
        summary.append([h, mode, metric, str(n), *cells])
    series = [[h, mode, attack, str(n), _fmt(metric, v)]
              for (h, mode, metric, n, attack), v in sorted(med.items(), key=_series_order)
              if metric == "fidelity"]
    for name, header, body in (("summary.csv", SUMMARY_COLUMNS, summary), ("fidelity_vs_n.csv", SERIES_COLUMNS, series)):
        with (out / name).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(body)
    return summary


def format_table(summary: list[list[str]]) -> str:
    """Fixed-width text rendering of the summary rows for the terminal."""
    table = [list(SUMMARY_COLUMNS[1:])] + [r[1:] for r in summary]
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in table)
