"""Merge per-run metric CSVs into mean ± std tables."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data.metrics import METRIC_NAMES
from .errors import ConfigError, InputError


def format_pm(mean: float, std: float, digits: int = 2) -> str:
    """Render fractions as percentages, e.g. ``(0.9344, 0.0014) -> "93.44±0.14"``."""
    if not (np.isfinite(mean) and np.isfinite(std)):
        return "n/a"
    return f"{100 * mean:.{digits}f}±{100 * std:.{digits}f}"


def summarize(values):
    """``(mean, std)`` with the population standard deviation (ddof=0)."""
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return float("nan"), float("nan")
    return float(values.mean()), float(values.std())


def read_metric_rows(path):
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    missing = [c for c in ("task", "mode") + METRIC_NAMES if rows and c not in rows[0]]
    if missing:
        raise InputError(f"{path}: missing columns {missing}")
    return rows


def collect(run_dirs):
    """All metric rows from ``metrics.csv`` files under the given run directories."""
    files = []
    for d in run_dirs:
        d = Path(d)
        if d.is_file():
            files.append(d)
        elif d.is_dir():
            files.extend(sorted(d.rglob("metrics.csv")))
        else:
            raise ConfigError(f"run directory {d} does not exist")
    if not files:
        raise ConfigError("no metrics.csv files found in the given run directories")
    rows = []
    for f in files:
        for row in read_metric_rows(f):
            row.setdefault("run", str(f.parent))
            rows.append(row)
    if not rows:
        raise ConfigError("metric files contain no rows")
    return rows


def aggregate_table(rows):
    """Group by (task, mode, run) and reduce each metric to mean and std."""
    groups = {}
    for row in rows:
        key = (row["task"], row["mode"], row.get("run", ""))
        groups.setdefault(key, []).append(row)
    table = []
    for (task, mode, run), members in sorted(groups.items()):
        entry = {"task": task, "mode": mode, "run": run, "n": len(members)}
        for m in METRIC_NAMES:
            entry[m] = summarize([float(r[m]) for r in members])
        table.append(entry)
    return table


def render_markdown(table) -> str:
    lines = []
    for task in sorted({e["task"] for e in table}):
        lines.append(f"## {task}\n")
        lines.append("| method | runs | " + " | ".join(METRIC_NAMES) + " |")
        lines.append("|---|---|" + "---|" * len(METRIC_NAMES))
        for e in (e for e in table if e["task"] == task):
            name = f"{e['mode']} ({Path(e['run']).name})" if e["run"] else e["mode"]
            cells = [format_pm(*e[m]) for m in METRIC_NAMES]
            lines.append(f"| {name} | {e['n']} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def write_report(run_dirs, out_dir):
    """Write ``report.md`` and ``report.csv``; returns the aggregated table."""
    table = aggregate_table(collect(run_dirs))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.md").write_text(render_markdown(table))
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "mode", "run", "n"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")])
        for e in table:
            w.writerow([e["task"], e["mode"], e["run"], e["n"]] + [repr(v) for m in METRIC_NAMES for v in e[m]])
    return table
