"""Report writers: delimited data files plus PNG renderings of the same data.

Every figure is drawn from the numbers written next to it, so the data
files stay the source of truth and the PNGs are a convenience.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib
matplotlib.use("Agg")
from matplotlib.figure import Figure  # noqa: E402

from .harness import RunLog, SummaryReport, SweepReport, WindowStudy  # noqa: E402
from .qoe import METRIC_NAMES  # noqa: E402

METRIC_LABELS = {
    "avg_qoe": "average QoE",
    "avg_quality_mbps": "average quality (Mbps)",
    "avg_quality_variation_mbps": "quality variation (Mbps)",
    "success_rate": "success rate",
    "avg_energy_j": "average energy (J)",
}

DPI = 120


def _figure(width=6.0, height=3.6) -> tuple[Figure, object]:
    fig = Figure(figsize=(width, height), dpi=DPI)
    ax = fig.add_subplot(1, 1, 1)
    return fig, ax


def _save(fig: Figure, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    return path


def write_json(doc, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path


def summary_rows(report: SummaryReport) -> list[dict]:
    rows = []
    for policy in report.policies():
        for seed, m in sorted(report.results[policy].items()):
            rows.append({"policy": policy, "seed": seed, **m.as_dict()})
    return rows


def write_summary(report: SummaryReport, out_dir: str | Path, stem: str = "summary",
                  plot: bool = True) -> list[Path]:
    """``<stem>.json`` (per seed, mean, std), ``<stem>.csv`` (per seed) and a bar chart."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [write_json(report.to_dict(), out / f"{stem}.json")]
    path = out / f"{stem}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["policy", "seed", *METRIC_NAMES, "frames"], lineterminator="\n")
        w.writeheader()
        for row in summary_rows(report):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    written.append(path)
    if plot:
        written.append(plot_summary(report, out / f"{stem}.png"))
    return written


def plot_summary(report: SummaryReport, path: str | Path) -> Path:
    policies = report.policies()
    metrics = ("avg_qoe", "avg_quality_mbps", "avg_quality_variation_mbps", "success_rate")
    fig = Figure(figsize=(3.0 * len(metrics), 3.4), dpi=DPI)
    for k, metric in enumerate(metrics):
        ax = fig.add_subplot(1, len(metrics), k + 1)
        means = [report.mean(p, metric) for p in policies]
        stds = [report.std(p, metric) for p in policies]
        ax.bar(range(len(policies)), means, yerr=stds, capsize=3, color="0.55")
        ax.set_xticks(range(len(policies)))
        ax.set_xticklabels(policies, rotation=30, ha="right", fontsize=8)
        ax.set_title(METRIC_LABELS[metric], fontsize=9)
        ax.axhline(0.0, color="k", lw=0.6)
    return _save(fig, Path(path))


def write_sweep(result: SweepReport, out_dir: str | Path, stem: str = "sweep",
                plot: bool = True) -> list[Path]:
    """Grid CSV, gnuplot ``splot`` blocks, per-cell JSON and a heatmap."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    csv_path.write_text(result.to_csv(), encoding="utf-8")
    dat_path = out / f"{stem}.dat"
    dat_path.write_text(result.to_gnuplot(), encoding="utf-8")
    written = [csv_path, dat_path, write_json(result.to_dict(), out / f"{stem}.json")]
    if plot:
        written.append(plot_sweep(result, out / f"{stem}.png"))
    return written


def plot_sweep(result: SweepReport, path: str | Path) -> Path:
    fig, ax = _figure(6.0, 4.2)
    im = ax.imshow(result.qoe, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(result.n_grid)))
    ax.set_xticklabels([str(n) for n in result.n_grid])
    ax.set_yticks(range(len(result.e_grid)))
    ax.set_yticklabels([f"{e:g}" for e in result.e_grid])
    ax.set_xlabel("subchannel limit n_max")
    ax.set_ylabel("energy budget e (J)")
    for i, row in enumerate(result.qoe):
        for j, v in enumerate(row):
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=6, color="w")
    fig.colorbar(im, ax=ax, label="average QoE")
    return _save(fig, Path(path))


def write_window(study: WindowStudy, out_dir: str | Path, stem: str = "window",
                 plot: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{stem}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["o", "mean_qoe", "std_qoe"], lineterminator="\n")
        w.writeheader()
        for row in study.rows():
            w.writerow({"o": row["o"], "mean_qoe": repr(row["mean_qoe"]),
                        "std_qoe": repr(row["std_qoe"])})
    written = [path, write_json(study.report.to_dict(), out / f"{stem}.json")]
    if plot:
        written.append(plot_window(study, out / f"{stem}.png"))
    return written


def plot_window(study: WindowStudy, path: str | Path) -> Path:
    rows = study.rows()
    fig, ax = _figure()
    ax.errorbar([r["o"] for r in rows], [r["mean_qoe"] for r in rows],
                yerr=[r["std_qoe"] for r in rows], marker="o", capsize=3, color="k")
    ax.set_xlabel("observation window o (frames)")
    ax.set_ylabel("average QoE")
    return _save(fig, Path(path))


def write_curves(curves: Mapping[str, Sequence[float]], out_dir: str | Path,
                 stem: str = "learning_curve", plot: bool = True) -> list[Path]:
    """One column per run; rows are training episodes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(curves)
    length = max((len(c) for c in curves.values()), default=0)
    path = out / f"{stem}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", *names])
        for k in range(length):
            w.writerow([k + 1] + [repr(curves[n][k]) if k < len(curves[n]) else ""
                                  for n in names])
    written = [path]
    if plot:
        fig, ax = _figure()
        for n in names:
            ax.plot(range(1, len(curves[n]) + 1), curves[n], lw=1.0, label=n)
        ax.set_xlabel("training episode")
        ax.set_ylabel("mean reward (QoE)")
        if names:
            ax.legend(fontsize=8, frameon=False)
        written.append(_save(fig, out / f"{stem}.png"))
    return written


def write_runlogs(report: SummaryReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for policy, per_seed in report.runlogs.items():
        for seed, runlog in sorted(per_seed.items()):
            path = out / f"runlog_{policy}_seed{seed}.csv"
            runlog.write_csv(path)
            written.append(path)
    return written


def write_runlog(runlog: RunLog, path: str | Path) -> Path:
    runlog.write_csv(path)
    return Path(path)
