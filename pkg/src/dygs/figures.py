"""Report figures rendered to files next to the delimited outputs.

Everything uses the Agg backend so runs stay headless; callers pass data in,
functions write one PNG each and return the path.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_loss_curves(log_csv, out_png, smooth=51):
    """Total + main loss components over iterations from train_log.csv."""
    import csv

    rows = list(csv.DictReader(open(log_csv)))
    if not rows:
        return None
    it = np.array([int(r["iteration"]) for r in rows])
    fig, ax = plt.subplots(figsize=(7, 4))

    def series(col):
        return np.array([float(r[col]) for r in rows])

    def smoothed(y):
        if len(y) < smooth * 2:
            return y
        k = np.ones(smooth) / smooth
        return np.convolve(y, k, mode="same")

    ax.plot(it, smoothed(series("total")), label="total", lw=1.5)
    for col, label in (("l1_weighted", "L1"), ("ssim_weighted", "SSIM"),
                       ("depth_g_weighted", "depth (global)"),
                       ("mc_weighted", "motion continuity")):
        y = series(col)
        if np.any(y != 0):
            ax.plot(it, smoothed(y), label=label, lw=1.0, alpha=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training losses")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def save_view_grid(pairs, out_png, max_views=8):
    """Side-by-side render/ground-truth strips for up to max_views views."""
    pairs = pairs[:max_views]
    if not pairs:
        return None
    n = len(pairs)
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4), squeeze=False)
    for j, (t, rendered, gt) in enumerate(pairs):
        axes[0][j].imshow(np.clip(rendered, 0, 1))
        axes[0][j].set_title(f"t={t}", fontsize=8)
        axes[1][j].imshow(np.clip(gt, 0, 1))
        for i in (0, 1):
            axes[i][j].set_xticks([])
            axes[i][j].set_yticks([])
    axes[0][0].set_ylabel("rendered", fontsize=8)
    axes[1][0].set_ylabel("ground truth", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def save_psnr_per_view(view_rows, out_png):
    if not view_rows:
        return None
    ts = [r["t"] for r in view_rows]
    ps = [r["psnr"] for r in view_rows]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(ts, ps, marker="o", ms=3, lw=1)
    ax.set_xlabel("timestep")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title("held-out view quality")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def save_trajectory_plot(est_cams, gt_cams, alignment, out_png):
    """Top-down (x, y) plot of aligned estimated vs ground-truth centers."""
    p_est = np.stack([c.center for c in est_cams])
    p_gt = np.stack([c.center for c in gt_cams])
    from .geometry import quat_to_mat

    s = alignment["scale"]
    R = quat_to_mat(np.asarray(alignment["rotation_quat"]))
    t = np.asarray(alignment["translation"])
    aligned = p_est @ (s * R).T + t
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(p_gt[:, 0], p_gt[:, 1], "-", label="ground truth", lw=1.2)
    ax.plot(aligned[:, 0], aligned[:, 1], "--", label="estimated (aligned)", lw=1.2)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.legend(fontsize=8)
    ax.set_title("camera trajectory (top view)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
