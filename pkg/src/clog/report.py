"""Tables and plot data built from one or more result bundles."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from clog.errors import InvalidInputError
from clog.metrics import METRIC_NAMES, format_mean_std

FORMATS = ("csv", "plot")


def summary_rows(bundles) -> list[dict]:
    rows = []
    for b in bundles:
        row = {"strategy": b.strategy_id, "dataset": b.config["dataset_id"], "backbone": b.config["backbone_kind"]}
        agg = b.aggregate
        for name in METRIC_NAMES:
            mean, std = agg.mean_std[name] if agg else (math.nan, math.nan)
            row[name] = format_mean_std(mean, std)
            row[f"{name}_mean"] = mean
            row[f"{name}_std"] = std
        row["orders"] = len(b.reports)
        row["incomplete_orders"] = " ".join(map(str, b.incomplete_orders))
        rows.append(row)
    return rows


def curve_rows(bundles) -> list[dict]:
    """AQ after t tasks and the running AIQ, order-averaged: T rows per strategy."""
    rows = []
    for b in bundles:
        if b.aggregate is None:
            continue
        aq = b.aggregate.aq
        for t in range(1, len(aq) + 1):
            rows.append(
                {
                    "strategy": b.strategy_id,
                    "tasks_seen": t,
                    "aq": aq[t - 1],
                    "aiq": float(np.mean(aq[:t])),
                }
            )
    return rows


def resource_rows(bundles) -> list[dict]:
    rows = []
    for b in bundles:
        for order in sorted(b.wall_times):
            for t, (wall, stored) in enumerate(zip(b.wall_times[order], b.stored_values[order])):
                rows.append(
                    {
                        "strategy": b.strategy_id,
                        "order": order,
                        "task": t + 1,
                        "stored_values": stored,
                        "wall_time_s": wall,
                    }
                )
    return rows


def _write_csv(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return path


def write_bundle_tables(bundles, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        _write_csv(out / "summary.csv", summary_rows(bundles)),
        _write_csv(out / "curves.csv", curve_rows(bundles)),
        _write_csv(out / "resources.csv", resource_rows(bundles)),
    ]


def plot_curves(bundles, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for b in bundles:
        rows = [r for r in curve_rows([b])]
        ax.plot([r["tasks_seen"] for r in rows], [r["aiq"] for r in rows], marker="o", label=b.strategy_id)
    ax.set_xlabel("tasks learned")
    ax.set_ylabel("AIQ (FID)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def emit_report(bundles: Sequence, out_dir, format: str = "csv") -> list[Path]:
    if format not in FORMATS:
        raise InvalidInputError(f"unknown report format {format!r}; expected one of {FORMATS}")
    paths = write_bundle_tables(bundles, out_dir)
    if format == "plot":
        paths.append(plot_curves(bundles, Path(out_dir) / "aiq_curves.png"))
    return paths
