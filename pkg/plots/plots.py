#!/usr/bin/env python3
"""Render figures from a benchmark report.json.

Two subcommands:
  depth  line plot of mean gain vs evaluation recurrence depth, one panel
         per metric group, stderr error bars, dashed zero line
  bars   horizontal per-dataset gain bars for the chosen recurrent method,
         sorted by gain, one panel per metric group

This tool only renders numbers already present in the report document; it
never recomputes metrics. Both commands write a PNG and an SVG next to each
other and are byte-stable across runs (no timestamps or salted ids in the
output).

Usage: plots.py depth|bars --in report.json --out figure.png
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "latentloop-plots"
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

SCHEMA_VERSION = 1


def fail(message):
    print(f"error: {message}", file=sys.stderr)
    sys.exit(1)


def load_report(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        fail(f"report file not found: {path}")
    except json.JSONDecodeError as e:
        fail(f"{path}: not valid JSON ({e})")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        fail(f"schema_version: expected {SCHEMA_VERSION}, found {version!r}")
    return doc


def save_stable(fig, out_path):
    """Write PNG + SVG siblings with generator metadata stripped so repeated
    renders produce identical bytes."""
    out = Path(out_path)
    png = out.with_suffix(".png")
    svg = out.with_suffix(".svg")
    fig.savefig(png, metadata={"Software": None})
    fig.savefig(svg, metadata={"Date": None})
    plt.close(fig)
    return png, svg


def plot_depth_scaling(report, out_path):
    """One panel per metric group: mean gain (%) vs R_eval with stderr bars
    and a dashed baseline at zero. Returns the plotted series for round-trip
    checks."""
    series = report.get("depth_series")
    if not series:
        fail("report.json: missing or empty field 'depth_series'")
    fig, axes = plt.subplots(
        1, len(series), figsize=(4.4 * len(series), 3.4), squeeze=False
    )
    plotted = []
    for ax, group in zip(axes[0], series):
        points = group.get("points")
        if not points:
            fail("depth_series: group without 'points'")
        xs = [p["r_eval"] for p in points]
        ys = [p["mean_gain"] for p in points]
        errs = [p["stderr_gain"] for p in points]
        ax.axhline(0.0, linestyle="--", linewidth=1.0, color="0.5")
        ax.errorbar(xs, [100 * y for y in ys], yerr=[100 * e for e in errs],
                    marker="o", capsize=3)
        ax.set_title(group["metric"])
        ax.set_xlabel("evaluation recurrence depth R")
        ax.set_ylabel("mean gain vs baseline (%)")
        ax.set_xticks(xs)
        plotted.append({"metric": group["metric"], "r_eval": xs,
                        "mean_gain": ys, "stderr_gain": errs})
    fig.tight_layout()
    save_stable(fig, out_path)
    return plotted


def plot_gain_bars(report, out_path, family="cot"):
    """Horizontal per-dataset gain bars for one method family, sorted by
    gain, stderr-over-seeds whiskers. Returns plotted values."""
    groups = report.get("groups")
    if not groups:
        fail("report.json: missing or empty field 'groups'")
    panels = []
    for metric_name in sorted(groups):
        fams = groups[metric_name].get("families", {})
        if family not in fams:
            fail(f"groups.{metric_name}.families: no {family!r} entry")
        per_ds = fams[family].get("per_dataset", {})
        if not per_ds:
            fail(f"groups.{metric_name}.families.{family}: no per-dataset "
                 "gains to plot")
        rows = sorted(per_ds.items(), key=lambda kv: kv[1]["gain"])
        panels.append((metric_name, rows))

    fig, axes = plt.subplots(
        1, len(panels), figsize=(4.8 * len(panels), 3.4), squeeze=False
    )
    plotted = []
    for ax, (metric_name, rows) in zip(axes[0], panels):
        names = [ds for ds, _ in rows]
        gains = [v["gain"] for _, v in rows]
        spread = []
        for _, v in rows:
            per_seed = v.get("per_seed_gain", [])
            if len(per_seed) > 1:
                mean = sum(per_seed) / len(per_seed)
                var = sum((g - mean) ** 2 for g in per_seed) / \
                    (len(per_seed) - 1)
                spread.append((var ** 0.5) / len(per_seed) ** 0.5)
            else:
                spread.append(0.0)
        ax.barh(range(len(rows)), [100 * g for g in gains],
                xerr=[100 * s for s in spread], capsize=3)
        ax.axvline(0.0, linestyle="--", linewidth=1.0, color="0.5")
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels(names)
        ax.set_xlabel(f"{family} gain vs baseline (%)")
        ax.set_title(metric_name)
        plotted.append({"metric": metric_name, "datasets": names,
                        "gain": gains, "stderr": spread})
    fig.tight_layout()
    save_stable(fig, out_path)
    return plotted


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="plots.py", description="Render benchmark report figures."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("depth", "bars"):
        p = sub.add_parser(name)
        p.add_argument("--in", dest="inp", required=True,
                       help="path to report.json")
        p.add_argument("--out", required=True,
                       help="output image path (.png; .svg written too)")
        if name == "bars":
            p.add_argument("--family", default="cot",
                           help="method family to plot (default cot)")
    args = parser.parse_args(argv)
    report = load_report(args.inp)
    if args.command == "depth":
        plot_depth_scaling(report, args.out)
    else:
        plot_gain_bars(report, args.out, family=args.family)
    return 0


if __name__ == "__main__":
    sys.exit(main())
