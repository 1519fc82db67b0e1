"""Report emission: summary tables (CSV + markdown) and matplotlib figures
rendered next to the delimited output.

Re-emitting the same run directory produces byte-identical files; nothing
here embeds timestamps or absolute paths.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

ALGORITHMS = ("erm", "groupdro", "rwg", "subg")
ENV_SOURCES = ("none", "ground-truth", "xrm")

_PNG_META = {"Software": "crossrisk"}


def _load_cells(run_dir: Path) -> dict:
    """{(algorithm, env_source): report dict or None for incomplete cells}."""
    cells = {}
    phase2 = run_dir / "phase2"
    if not phase2.is_dir():
        return cells
    for cell_dir in sorted(phase2.iterdir()):
        if not cell_dir.is_dir():
            continue
        report_path = cell_dir / "report.json"
        if report_path.exists():
            with open(report_path) as f:
                rep = json.load(f)
            cells[(rep["algorithm"], rep["env_source"])] = rep
        else:
            algo, _, source = cell_dir.name.partition("_")
            source = {"groundtruth": "ground-truth"}.get(source, source)
            cells[(algo, source)] = None
    return cells


def _fmt_cell(rep) -> str:
    if rep is None:
        return "(incomplete)"
    return f"{100 * rep['test_wga_mean']:.1f} ±{100 * rep['test_wga_std']:.2f}"


def emit_report(run_dir) -> Path:
    """Render tables and figures for a completed or partial run directory."""
    run_dir = Path(run_dir)
    cells = _load_cells(run_dir)
    has_phase1 = (run_dir / "envs" / "metadata.json").exists()
    if not cells and not has_phase1:
        raise ValueError(f"{run_dir} contains no results to report")
    report_dir = run_dir / "report"
    fig_dir = report_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)

    dataset = next((r["dataset"] for r in cells.values() if r), run_dir.name)
    _write_summary(report_dir, dataset, cells)
    _write_per_group(report_dir, cells)
    if cells:
        _fig_summary(fig_dir, cells)
        _fig_per_group(fig_dir, cells)
    if has_phase1:
        _write_flip_trajectories(run_dir, report_dir, fig_dir)
    return report_dir


def _write_summary(report_dir: Path, dataset: str, cells: dict) -> None:
    with open(report_dir / "summary.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["dataset", "algorithm", "env_source", "test_wga_mean", "test_wga_std",
             "n_seeds", "winner_val_metric", "status"]
        )
        for (algo, source), rep in sorted(cells.items()):
            if rep is None:
                writer.writerow([dataset, algo, source, "", "", "", "", "incomplete"])
            else:
                writer.writerow(
                    [dataset, algo, source,
                     format(rep["test_wga_mean"], ".6f"), format(rep["test_wga_std"], ".6f"),
                     len(rep["test_wga_per_seed"]), format(rep["winner_val_metric"], ".6f"),
                     "complete"]
                )

    sources = [s for s in ENV_SOURCES if any(k[1] == s for k in cells)]
    algos = [a for a in ALGORITHMS if any(k[0] == a for k in cells)]
    lines = [
        f"# Test worst-group accuracy: {dataset}",
        "",
        "Mean ± std over rerun seeds, scored against ground-truth groups.",
        "",
        "| algorithm | " + " | ".join(sources) + " |",
        "|---|" + "---|" * len(sources),
    ]
    for algo in algos:
        row = [algo]
        for s in sources:
            row.append(_fmt_cell(cells[(algo, s)]) if (algo, s) in cells else "—")
        lines.append("| " + " | ".join(row) + " |")
    (report_dir / "summary.md").write_text("\n".join(lines) + "\n")


def _write_per_group(report_dir: Path, cells: dict) -> None:
    with open(report_dir / "per_group_accuracy.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["algorithm", "env_source", "group", "test_accuracy_mean"])
        for (algo, source), rep in sorted(cells.items()):
            if rep is None:
                continue
            for g, acc in enumerate(rep["per_group_test_acc_mean"]):
                writer.writerow(
                    [algo, source, g, "" if acc is None else format(acc, ".6f")]
                )


def _write_flip_trajectories(run_dir: Path, report_dir: Path, fig_dir: Path) -> None:
    with open(run_dir / "envs" / "metadata.json") as f:
        meta = json.load(f)
    combo = meta["combo_id"]
    seeds = meta["seeds_used"]
    trajectories = []
    for s in seeds:
        path = run_dir / "phase1" / "trials" / f"c{combo:02d}_s{s:02d}.npz"
        if path.exists():
            with np.load(path) as z:
                trajectories.append(z["trajectory"])
    if not trajectories:
        return
    arr = np.vstack(trajectories)
    with open(report_dir / "flip_trajectories.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration"] + [f"seed_{s}" for s in seeds] + ["mean"])
        for it in range(arr.shape[1]):
            writer.writerow(
                [it] + [format(v, ".6f") for v in arr[:, it]] + [format(arr[:, it].mean(), ".6f")]
            )

    fig, ax = plt.subplots(figsize=(6, 4))
    for s, traj in zip(seeds, arr):
        ax.plot(traj, lw=0.8, alpha=0.5, label=f"seed {s}")
    ax.plot(arr.mean(axis=0), lw=2.0, color="black", label="mean")
    ax.set_xlabel("iteration")
    ax.set_ylabel("flip fraction")
    ax.set_title(f"label flips, winning combo {combo}")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(fig_dir / "flip_trajectories.png", dpi=120, metadata=_PNG_META)
    plt.close(fig)


def _fig_summary(fig_dir: Path, cells: dict) -> None:
    done = {k: v for k, v in cells.items() if v is not None}
    if not done:
        return
    labels = [f"{a}\n{s}" for (a, s) in sorted(done)]
    means = [done[k]["test_wga_mean"] for k in sorted(done)]
    stds = [done[k]["test_wga_std"] for k in sorted(done)]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    x = np.arange(len(labels))
    ax.bar(x, means, yerr=stds, capsize=3, color="tab:blue")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("test worst-group accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(fig_dir / "summary_wga.png", dpi=120, metadata=_PNG_META)
    plt.close(fig)


def _fig_per_group(fig_dir: Path, cells: dict) -> None:
    done = {k: v for k, v in cells.items() if v is not None}
    if not done:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    keys = sorted(done)
    n_groups = max(len(done[k]["per_group_test_acc_mean"]) for k in keys)
    width = 0.8 / len(keys)
    for j, k in enumerate(keys):
        accs = [np.nan if a is None else a for a in done[k]["per_group_test_acc_mean"]]
        ax.bar(np.arange(len(accs)) + j * width, accs, width=width, label=f"{k[0]}/{k[1]}")
    ax.set_xticks(np.arange(n_groups) + 0.4 - width / 2)
    ax.set_xticklabels([f"g{g}" for g in range(n_groups)])
    ax.set_xlabel("group (label x env)")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(fig_dir / "per_group_accuracy.png", dpi=120, metadata=_PNG_META)
    plt.close(fig)
