"""Delimited summaries and figures for runs and sweeps.

Every report path writes CSV next to the JSON record and renders the
matching matplotlib figures to files; nothing is displayed interactively.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_run_outputs(record, outdir):
    """run_record.json companion files: summary.csv plus two figures."""
    os.makedirs(outdir, exist_ok=True)
    paths = {}

    csv_path = os.path.join(outdir, "summary.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "J_t", "sim_t", "trainable_params", "A_T_so_far"])
        s = np.array([[np.nan if v is None else v for v in row] for row in record["S"]])
        for entry in record["per_task"]:
            t = entry["t"]
            col = s[:t, t - 1]
            writer.writerow([t, entry["J_t"],
                             "" if entry["sim_t"] is None else f"{entry['sim_t']:.6f}",
                             entry["trainable_params"], f"{np.mean(col):.6f}"])
        writer.writerow([])
        writer.writerow(["A_T", record["A_T"]])
        writer.writerow(["F_T", record["F_T"]])
    paths["summary"] = csv_path

    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(s, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xlabel("trained through task")
    ax.set_ylabel("evaluated task")
    upto = s.shape[0]
    ax.set_xticks(range(upto), [str(i + 1) for i in range(upto)])
    ax.set_yticks(range(upto), [str(i + 1) for i in range(upto)])
    fig.colorbar(im, ax=ax, label="accuracy")
    ax.set_title("accuracy matrix")
    fig.tight_layout()
    matrix_path = os.path.join(outdir, "accuracy_matrix.png")
    fig.savefig(matrix_path, dpi=120)
    plt.close(fig)
    paths["matrix_figure"] = matrix_path

    fig, ax = plt.subplots(figsize=(5, 4))
    xs = np.arange(1, upto + 1)
    ax.plot(xs, [np.nanmean(s[:t, t - 1]) for t in xs], marker="o",
            label="average accuracy")
    for t in range(upto):
        ax.plot(np.arange(t + 1, upto + 1), s[t, t:], alpha=0.4,
                label=f"task {t + 1}" if upto <= 6 else None)
    ax.set_xlabel("trained through task")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=8)
    fig.tight_layout()
    curve_path = os.path.join(outdir, "accuracy_curves.png")
    fig.savefig(curve_path, dpi=120)
    plt.close(fig)
    paths["curves_figure"] = curve_path
    return paths


def write_sweep_outputs(records, param, outdir):
    """Merged sweep report: one CSV plus an A_T-vs-value figure."""
    os.makedirs(outdir, exist_ok=True)
    csv_path = os.path.join(outdir, "sweep.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([param, "A_T", "F_T", "trainable_params_final"])
        for rec in records:
            writer.writerow([rec["sweep"]["value"], rec["A_T"], rec["F_T"],
                             rec["trainable_params_final"]])

    fig, ax = plt.subplots(figsize=(5, 4))
    values = [str(rec["sweep"]["value"]) for rec in records]
    ax.plot(values, [rec["A_T"] for rec in records], marker="o")
    ax.set_xlabel(param)
    ax.set_ylabel("average accuracy")
    fig.tight_layout()
    fig_path = os.path.join(outdir, "sweep.png")
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return {"sweep_csv": csv_path, "sweep_figure": fig_path}
