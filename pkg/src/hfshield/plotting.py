"""Report figures.  Every function returns PNG bytes so callers control where files land."""
from __future__ import annotations

import io
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

ARM_COLORS = {"none": "#7f7f7f", "uniform": "#1f77b4", "hf": "#d62728"}

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 110,
    "savefig.bbox": "tight",
}


def _to_png(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def _grouped_bars(ax, report: MetricsReport, key: str, methods, purifiers):
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(purifiers))
    for j, method in enumerate(methods):
        means, stds = [], []
        for p in purifiers:
            try:
                row = report.row(method, p)
                means.append(row[f"{key}_mean"])
                stds.append(row[f"{key}_std"])
            except KeyError:
                means.append(math.nan)
                stds.append(math.nan)
        ax.bar(x + (j - (len(methods) - 1) / 2) * width, means, width, yerr=stds, capsize=2,
               label=method, color=ARM_COLORS.get(method))
    ax.set_xticks(x)
    ax.set_xticklabels(purifiers)


def retention_figure(report: MetricsReport) -> bytes:
    methods = [m for m in _methods(report) if m not in ("none", "pretrained")]
    purifiers = [p for p in _purifiers(report) if p != "-"]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        _grouped_bars(ax, report, "retention", methods, purifiers)
        ax.axhline(1.0, color="k", lw=0.6, ls=":")
        ax.set_ylabel("retention ratio")
        ax.set_title("perturbation energy surviving purification")
        ax.legend(frameon=False)
        return _to_png(fig)


def generation_figure(report: MetricsReport) -> bytes:
    methods = [m for m in _methods(report) if m != "pretrained"]
    purifiers = [p for p in _purifiers(report) if p != "-"]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 2.8))
        for ax, key, label in zip(axes, ("gen_hf", "gen_mse"), ("generated HF energy", "generated MSE to originals")):
            _grouped_bars(ax, report, key, methods, purifiers)
            ax.set_ylabel(label)
            try:
                base = report.row("pretrained", "-")[f"{key}_mean"]
                ax.axhline(base, color="k", lw=0.8, ls="--", label="pretrained")
            except KeyError:
                pass
        axes[0].legend(frameon=False, ncol=2)
        return _to_png(fig)


def attack_trace_figure(traces: dict[str, list[list[dict]]]) -> bytes:
    """``traces[arm]`` holds one per-iteration trace per identity."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 2.6))
        for arm, runs in traces.items():
            if not runs or not runs[0]:
                continue
            it = [r["iteration"] for r in runs[0]]
            mad = np.mean([[r["mean_abs_delta"] for r in run] for run in runs], axis=0)
            loss = np.mean([[r["adv_loss_db"] for r in run] for run in runs], axis=0)
            color = ARM_COLORS.get(arm)
            axes[0].plot(it, mad, label=arm, color=color)
            axes[1].plot(it, loss, label=arm, color=color)
        axes[0].set_xlabel("attack iteration")
        axes[0].set_ylabel("mean |delta|")
        axes[1].set_xlabel("attack iteration")
        axes[1].set_ylabel("surrogate loss on adversarial set")
        axes[0].legend(frameon=False)
        return _to_png(fig)


def identity_panel(rows: list[tuple[str, list[np.ndarray]]]) -> bytes:
    """Labelled grid: one row per (label, images)."""
    ncols = max(len(imgs) for _, imgs in rows)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(len(rows), ncols, figsize=(1.1 * ncols, 1.15 * len(rows)), squeeze=False)
        for r, (label, imgs) in enumerate(rows):
            for c in range(ncols):
                ax = axes[r, c]
                ax.set_xticks([])
                ax.set_yticks([])
                for s in ax.spines.values():
                    s.set_visible(False)
                if c < len(imgs):
                    ax.imshow(np.clip(imgs[c], 0, 1), interpolation="nearest")
            axes[r, 0].set_ylabel(label, rotation=0, ha="right", va="center", fontsize=7)
        fig.subplots_adjust(wspace=0.05, hspace=0.05)
        return _to_png(fig)


def tile(rows: list[list[np.ndarray]], pad: int = 1) -> np.ndarray:
    """Tile equally sized [H, W, C] images into one array, white separators."""
    h, w, c = rows[0][0].shape
    ncols = max(len(r) for r in rows)
    out = np.ones((len(rows) * (h + pad) - pad, ncols * (w + pad) - pad, c))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            out[i * (h + pad):i * (h + pad) + h, j * (w + pad):j * (w + pad) + w] = img
    return out


def _methods(report: MetricsReport) -> list[str]:
    return list(dict.fromkeys(r["method"] for r in report.rows))


def _purifiers(report: MetricsReport) -> list[str]:
    return list(dict.fromkeys(r["purifier"] for r in report.rows))
