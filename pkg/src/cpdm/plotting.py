"""Figures written next to the CSV outputs of the command-line tools."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({"figure.dpi": 100, "font.size": 9, "axes.grid": True, "grid.alpha": 0.3})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def loss_curve(reports, path, smooth: int = 50) -> Path:
    steps = np.array([r.step for r in reports])
    loss = np.array([r.loss for r in reports])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, loss, lw=0.6, alpha=0.4, label="per step")
    if len(loss) >= smooth:
        kernel = np.ones(smooth) / smooth
        ax.plot(steps[smooth - 1:], np.convolve(loss, kernel, mode="valid"), lw=1.5,
                label=f"{smooth}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("noise MSE")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)


def metric_report(report, path) -> Path:
    ids = [row[0] for row in report.per_image]
    cols = list(zip(*report.per_image))[1:] if report.per_image else [(), (), ()]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    for ax, values, label in zip(axes, cols, ("PSNR (dB)", "SSIM", "MSE")):
        finite = np.array([v for v in values if np.isfinite(v)])
        ax.bar(range(len(values)), np.nan_to_num(np.array(values, dtype=float), posinf=0.0), width=0.8)
        if finite.size:
            ax.axhline(finite.mean(), color="k", lw=1, ls="--")
        ax.set_title(label)
        ax.set_xlabel("image")
        if len(ids) <= 20:
            ax.set_xticks(range(len(ids)), ids, rotation=90, fontsize=6)
    fig.suptitle(report.dataset_name)
    return _save(fig, path)


def schedule_curves(schedule, path) -> Path:
    t = np.arange(1, schedule.T + 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(t, schedule.betas, label="beta")
    ax.plot(t, schedule.alpha_bars, label="alpha bar")
    ax.plot(t, schedule.posterior_variances, label="posterior variance")
    ax.set_xlabel("t")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)
