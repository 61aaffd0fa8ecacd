"""Report emission: canonical JSON, delimited tables, and rendered figures.

Every CLI report path writes three artifact kinds side by side: a versioned
JSON report (the machine interface), a CSV of the tabular core, and a PNG
figure rendered with matplotlib's Agg backend.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_json(obj, path) -> None:
    """Canonical JSON: sorted keys, stable float repr, trailing newline."""
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_loss_csv(losses, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, repr(float(loss))])


def plot_loss_curve(losses, path, title: str = "Training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(losses)), losses, lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("masked MSE (scaled units)")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_eval_csv(per_frame, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_id", "mse", "mean_euclid", "valid_pixels"])
        for row in per_frame:
            writer.writerow(
                [row["frame_id"], repr(row["mse"]), repr(row["mean_euclid"]), row["valid_pixels"]]
            )


def plot_eval(per_frame, path, title: str = "Held-out error per frame") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ids = [r["frame_id"] for r in per_frame]
    errs = [r["mean_euclid"] for r in per_frame]
    ax.bar([str(i) for i in ids], errs, color="#4878cf")
    ax.set_xlabel("frame")
    ax.set_ylabel("mean Euclidean error (original units)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_ablation_csv(cells, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["cell", "overrides", "status", "final_train_loss", "eval_mse",
             "eval_mean_euclid", "param_count", "seconds"]
        )
        for r in cells:
            ok = r["status"] == "ok"
            writer.writerow(
                [
                    r["cell"],
                    json.dumps(r["overrides"], sort_keys=True),
                    r["status"],
                    repr(r["final_train_loss"]) if ok else "",
                    repr(r["eval"]["mse"]) if ok else "",
                    repr(r["eval"]["mean_euclid"]) if ok else "",
                    r.get("param_count", ""),
                    f"{r['seconds']:.3f}",
                ]
            )


def plot_ablation(cells, path, best_cell=None) -> None:
    fig, ax = plt.subplots(figsize=(max(6, 0.7 * len(cells)), 4))
    ok = [r for r in cells if r["status"] == "ok"]
    xs = [r["cell"] for r in ok]
    ys = [r["eval"]["mean_euclid"] for r in ok]
    colors = ["#d65f5f" if best_cell is not None and c == best_cell else "#4878cf" for c in xs]
    ax.bar([str(x) for x in xs], ys, color=colors)
    ax.set_xlabel("cell")
    ax.set_ylabel("held-out mean Euclidean error")
    ax.set_title("Ablation grid")
    if any(r["status"] != "ok" for r in cells):
        failed = [r["cell"] for r in cells if r["status"] != "ok"]
        ax.text(0.02, 0.95, f"failed cells: {failed}", transform=ax.transAxes, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_residual_csv(report, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["ref_id", "src_id", "rmse", "n_points"])
        for row in report:
            writer.writerow([row["ref_id"], row["src_id"], repr(row["rmse"]), row["n_points"]])


def plot_residuals(report, path, title: str = "Alignment residuals per edge") -> None:
    fig, ax = plt.subplots(figsize=(max(6, 0.4 * len(report)), 4))
    labels = [f"{r['ref_id']}-{r['src_id']}" for r in report]
    values = [max(r["rmse"], 1e-16) for r in report]
    ax.bar(labels, values, color="#4878cf")
    ax.set_yscale("log")
    ax.set_xlabel("edge (ref-src)")
    ax.set_ylabel("RMSE")
    ax.set_title(title)
    ax.tick_params(axis="x", labelrotation=90, labelsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
