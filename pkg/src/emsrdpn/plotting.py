"""Figures written next to the text/JSON reports of the CLI."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}

SCALE_COLORS = {2: "#1b9e77", 3: "#d95f02", 4: "#7570b3", 8: "#e7298a"}


def _save(fig, path) -> Path:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format="png", metadata={"Software": None})
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_training_log(records: list[dict], path, window: int = 50) -> Path:
    """Per-scale loss traces with a running mean, and the learning rate."""
    with plt.rc_context(STYLE):
        fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6, 4.5), sharex=True,
                                        gridspec_kw={"height_ratios": [3, 1]})
        for s in sorted({r["scale"] for r in records}):
            its = [r["iter"] for r in records if r["scale"] == s]
            losses = [r["loss"] for r in records if r["scale"] == s]
            color = SCALE_COLORS.get(s)
            ax.plot(its, losses, lw=0.5, alpha=0.35, color=color)
            k = max(1, min(window, len(losses) // 5))
            smooth = [sum(losses[max(0, i - k + 1):i + 1]) / len(losses[max(0, i - k + 1):i + 1])
                      for i in range(len(losses))]
            ax.plot(its, smooth, lw=1.2, color=color, label=f"x{s}")
        ax.set_ylabel("MAE loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        ax_lr.step([r["iter"] for r in records], [r["lr"] for r in records], where="post", color="k", lw=1)
        ax_lr.set_ylabel("lr")
        ax_lr.set_xlabel("iteration")
        return _save(fig, path)


def plot_cost_report(report, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        labels = [f"SSI x{s}" for s in report.flops_ssi]
        values = [v / 1e12 for v in report.flops_ssi.values()]
        colors = [SCALE_COLORS.get(s, "0.5") for s in report.flops_ssi]
        if len(report.flops_ssi) > 1:
            labels.append("MSI")
            values.append(report.flops_msi / 1e12)
            colors.append("0.3")
            ax.axhline(sum(report.flops_ssi.values()) / 1e12, ls="--", lw=0.8, color="0.5",
                       label="sum of SSI")
            ax.legend(frameon=False)
        bars = ax.bar(labels, values, color=colors)
        ax.bar_label(bars, fmt="%.2f", fontsize=7)
        ax.set_ylabel(f"flops (T), {report.height}x{report.width} input")
        ax.set_title(f"{report.params_total:,} parameters")
        return _save(fig, path)


def plot_eval_report(report, path) -> Path:
    with plt.rc_context(STYLE):
        scales = report.scales()
        images = list(dict.fromkeys(r.image for r in report.rows))
        fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(images) * len(scales) + 2), 3))
        width = 0.8 / max(1, len(scales))
        for k, s in enumerate(scales):
            rows = {r.image: r.psnr_db for r in report.rows if r.scale == s}
            xs = [i + k * width for i, name in enumerate(images) if name in rows]
            ys = [min(rows[name], 100.0) for name in images if name in rows]
            ax.bar(xs, ys, width, label=f"x{s}", color=SCALE_COLORS.get(s))
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(images))], images, rotation=45, ha="right")
        ax.set_ylabel("PSNR (dB, Y)")
        ax.legend(frameon=False)
        return _save(fig, path)
