"""Figures written next to the CSV outputs of each command."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curves(history, path):
    """Generator loss components and the critic's Wasserstein estimate per step."""
    gen = [r for r in history if r["kind"] == "generator"]
    crit = [r for r in history if r["kind"] == "critic"]
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        if gen:
            steps = [r["step"] for r in gen]
            for key, label in (("L_G", "$L_G$"), ("L_p", "$L_p$"), ("L_rm", "$L_{rm}$")):
                ax1.plot(steps, [r[key] for r in gen], label=label, lw=1)
            ax1.set_yscale("log")
            ax1.legend(frameon=False)
        ax1.set_xlabel("generator step")
        ax1.set_ylabel("loss")
        if crit:
            ax2.plot([r["step"] for r in crit], [r["L_w"] for r in crit], lw=0.8, color="C3")
        ax2.set_xlabel("critic step")
        ax2.set_ylabel("$L_w$")
        fig.tight_layout()
        return _save(fig, path)


def save_comparison_grid(samples, path, titles=("Masked", "Output", "GT")):
    """One row per sample: masked input | inpainted output | ground truth (uint8 HWC)."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to draw")
    with plt.rc_context(RC):
        fig, axes = plt.subplots(len(samples), 3, figsize=(6, 2 * len(samples)), squeeze=False)
        for r, triple in enumerate(samples):
            for c, img in enumerate(triple):
                ax = axes[r][c]
                ax.imshow(img, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                for s in ax.spines.values():
                    s.set_visible(False)
                if r == 0:
                    ax.set_title(titles[c])
        fig.tight_layout()
        return _save(fig, path)


def plot_bucket_metrics(report, path):
    rows = report.buckets or [report.overall]
    labels = [s.label for s in rows]
    x = np.arange(len(rows))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 4, figsize=(10, 2.6))
        for ax, metric in zip(axes, ("FID", "MAE", "PSNR", "SSIM")):
            ax.bar(x, [getattr(s, metric.lower()) for s in rows], color="0.5")
            ax.set_xticks(x)
            ax.set_xticklabels(labels, rotation=45, ha="right")
            ax.set_title(metric)
        fig.tight_layout()
        return _save(fig, path)


def plot_ablation(rows, path):
    """Metrics against the reverse-mask loss weight; ``rows`` are ablation CSV dicts."""
    done = [r for r in rows if r.get("status") == "ok"]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 4, figsize=(10, 2.4))
        for ax, metric in zip(axes, ("FID", "MAE", "PSNR", "SSIM")):
            if done:
                ax.plot([float(r["lambda"]) for r in done], [float(r[metric]) for r in done], "o-", lw=1)
            ax.set_xlabel(r"$\lambda$")
            ax.set_title(metric)
        fig.tight_layout()
        return _save(fig, path)


def plot_hole_ratios(ratios, path, bucket=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 2.6))
        ax.hist(ratios, bins=30, color="0.5")
        if bucket is not None:
            for edge in (bucket.lo, bucket.hi):
                ax.axvline(edge, color="C3", lw=0.8, ls="--")
        ax.set_xlabel("hole-to-image ratio")
        ax.set_ylabel("masks")
        fig.tight_layout()
        return _save(fig, path)
