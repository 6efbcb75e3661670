"""Figures for a finished run: metric heat table, score distributions, map triptychs."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .datasets import stack_images  # noqa: E402
from .evaluation import EvalReport  # noqa: E402
from .uncertainty import normalize_map, raw_uncertainty_map, reconstructions  # noqa: E402


def plot_table(report: EvalReport, path: Path) -> Path:
    methods = sorted({c["method"] for c in report.cells})
    datasets = []
    for c in report.cells:
        if c["dataset"] not in datasets:
            datasets.append(c["dataset"])
    fig, axes = plt.subplots(1, 2, figsize=(max(8, 1.1 * len(datasets)), 2 + 0.9 * len(methods)), squeeze=False)
    for ax, metric in zip(axes[0], ("auc", "aupr")):
        grid = np.full((len(methods), len(datasets)), np.nan)
        for c in report.cells:
            grid[methods.index(c["method"]), datasets.index(c["dataset"])] = c[metric]["mean"]
        ax.imshow(grid, vmin=0, vmax=1, cmap="viridis", aspect="auto")
        for i in range(len(methods)):
            for j in range(len(datasets)):
                c = report.cell(datasets[j], methods[i])
                ax.text(j, i, f"{c[metric]['mean']:.2f}\n±{c[metric]['std']:.2f}", ha="center", va="center",
                        fontsize=6, color="white" if grid[i, j] < 0.6 else "black")
        ax.set_xticks(range(len(datasets)), datasets, rotation=60, ha="right", fontsize=7)
        ax.set_yticks(range(len(methods)), methods, fontsize=8)
        ax.set_title(metric.upper())
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_distributions(histograms: dict, path: Path, method: str = "drue") -> Path:
    entry = histograms["methods"][method]
    edges = np.asarray(entry["bin_edges"])
    centers = 0.5 * (edges[1:] + edges[:-1])
    rows = entry["datasets"]
    fig, ax = plt.subplots(figsize=(7, 0.35 * len(rows) + 1.5))
    for k, row in enumerate(rows):
        counts = np.asarray(row["counts"], dtype=float)
        if counts.max() > 0:
            counts = 0.8 * counts / counts.max()
        ax.fill_between(centers, k, k + counts, step="mid", alpha=0.7)
        ax.plot([row["median"]] * 2, [k, k + 0.8], color="k", lw=1)
    ax.set_yticks(np.arange(len(rows)) + 0.4, [r["dataset"] for r in rows], fontsize=7)
    ax.set_xlabel(f"{method} uncertainty")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_triptychs(bundle, samples, path: Path, title: str = "") -> Path:
    """Rows of input, reconstruction via G1, reconstruction via G0, normalised map."""
    X = stack_images(samples)
    x_hat, x_hat0 = reconstructions(X, bundle)
    maps = normalize_map(raw_uncertainty_map(X, bundle))
    fig, axes = plt.subplots(len(X), 4, figsize=(6, 1.6 * len(X)), squeeze=False)
    for i in range(len(X)):
        for ax, img, label in zip(axes[i], (X[i], x_hat[i], x_hat0[i], maps[i]),
                                  ("input", "x_hat (G1)", "x_hat' (G0)", "map")):
            ax.imshow(img, cmap="magma" if img.ndim == 2 else None, vmin=0, vmax=1)
            ax.set_axis_off()
            if i == 0:
                ax.set_title(label, fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_run(run_dir, bundle, split, ladder, n_examples: int = 3) -> list[Path]:
    run_dir = Path(run_dir)
    out = run_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    report = EvalReport.from_json((run_dir / "report.json").read_text())
    written = [plot_table(report, out / "table.png")]
    hist_path = run_dir / "histograms.json"
    if hist_path.is_file():
        histograms = json.loads(hist_path.read_text())
        for method in histograms["methods"]:
            written.append(plot_distributions(histograms, out / f"distribution_{method}.png", method))
    written.append(plot_triptychs(bundle, split.test[:n_examples], out / "maps_id.png", "in-distribution"))
    far = [r for r in ladder.rungs if r.severity > 0]
    if far:
        mid = far[len(far) // 2]
        written.append(plot_triptychs(bundle, mid.samples[:n_examples], out / "maps_shifted.png", mid.name))
    return written
