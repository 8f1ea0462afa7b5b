"""Figure output for reports: TRE bars, displacement snapshots, training curves.

Everything renders off-screen (Agg) straight to files.
"""
from __future__ import annotations

import math
from contextlib import contextmanager

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Ellipse  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    # keep PNG bytes reproducible across runs
    "svg.hashsalt": "r2n2",
}

METHOD_COLORS = {"before": "0.6", "r2n2": "tab:blue", "bspline": "tab:orange"}


@contextmanager
def figure_style():
    with plt.rc_context(RC):
        yield


def _save(fig, path) -> None:
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)


def plot_tre_bars(report, path) -> None:
    """Per-case mean TRE in pixels for no registration, R2N2 and B-spline."""
    names = [c.name for c in report.cases]
    keys = [("tre_before", "before"), ("tre_r2n2", "r2n2"), ("tre_bspline", "bspline")]
    x = np.arange(len(names))
    width = 0.27
    with figure_style():
        fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(names) + 2), 3))
        for k, (key, label) in enumerate(keys):
            vals = [c.in_pixels(key) for c in report.cases]
            ax.bar(x + (k - 1) * width, vals, width, label=label, color=METHOD_COLORS[label])
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=60, ha="right")
        ax.set_ylabel("mean TRE [px]")
        ax.legend(frameon=False, ncol=3)
        ax.spines[["top", "right"]].set_visible(False)
        _save(fig, path)


def _quiver(ax, image, field, stride: int) -> None:
    img = image.numpy()
    h, w = img.shape
    ax.imshow(img, cmap="gray", extent=(-1, 1, 1, -1), vmin=0, vmax=1)
    u = field.u.detach().numpy()[::stride, ::stride]
    v = field.v.detach().numpy()[::stride, ::stride]
    xs = field.grid.coords_x.numpy()[::stride, ::stride]
    ys = field.grid.coords_y.numpy()[::stride, ::stride]
    ax.quiver(xs, ys, u, v, color="tab:red", angles="xy", scale_units="xy", scale=1, width=0.004)
    ax.set_xlim(-1, 1)
    ax.set_ylim(1, -1)
    ax.set_xticks([])
    ax.set_yticks([])


def plot_displacement_snapshots(image, fields: dict, path, params=None, stride: int = 4) -> None:
    """Accumulated displacement after selected steps, with the local deformations so far as ellipses."""
    steps = sorted(fields)
    with figure_style():
        fig, axes = plt.subplots(1, len(steps), figsize=(2.4 * len(steps), 2.6), squeeze=False)
        for ax, t in zip(axes[0], steps):
            _quiver(ax, image, fields[t], stride)
            if params is not None:
                for row in np.asarray(params)[:t]:
                    x, y, sx, sy, alpha = row[:5]
                    # one-sigma contour of the local envelope
                    ax.add_patch(Ellipse((x, y), 2 * math.sqrt(sx), 2 * math.sqrt(sy),
                                         angle=math.degrees(alpha), fill=False, lw=0.6, color="gold"))
            ax.set_title(f"t = {t}")
        _save(fig, path)


def plot_field_comparison(image, net_field, bs_field, path, stride: int = 4) -> None:
    with figure_style():
        fig, axes = plt.subplots(1, 2, figsize=(5.2, 2.7))
        _quiver(axes[0], image, net_field, stride)
        axes[0].set_title("R2N2")
        _quiver(axes[1], image, bs_field, stride)
        axes[1].set_title("B-spline")
        _save(fig, path)


def plot_registration(fixed, moving, warped, field, path, stride: int = 4) -> None:
    """Fixed, moving, warped and |F - warped| next to the estimated field."""
    diff_before = np.abs(fixed.numpy() - moving.numpy())
    diff_after = np.abs(fixed.numpy() - warped.numpy())
    vmax = max(float(diff_before.max()), 1e-6)
    with figure_style():
        fig, axes = plt.subplots(1, 5, figsize=(12, 2.6))
        for ax, img, title in zip(axes[:3], (fixed, moving, warped), ("fixed", "moving", "warped")):
            ax.imshow(img.numpy(), cmap="gray", vmin=0, vmax=1)
            ax.set_title(title)
        axes[3].imshow(diff_after, cmap="magma", vmin=0, vmax=vmax)
        axes[3].set_title("|fixed - warped|")
        _quiver(axes[4], fixed, field, stride)
        axes[4].set_title("displacement")
        for ax in axes[:4]:
            ax.set_xticks([])
            ax.set_yticks([])
        _save(fig, path)


def plot_training_curve(metrics_rows, path) -> None:
    it = np.array([r["iteration"] for r in metrics_rows])
    loss = np.array([r["loss"] for r in metrics_rows])
    img = np.array([r["image_loss"] for r in metrics_rows])
    with figure_style():
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.semilogy(it, loss, lw=0.6, color="tab:blue", alpha=0.4, label="loss")
        if len(loss) >= 20:
            k = max(len(loss) // 50, 5)
            smooth = np.convolve(loss, np.ones(k) / k, mode="valid")
            ax.semilogy(it[k - 1:], smooth, lw=1.2, color="tab:blue", label=f"loss ({k}-iter mean)")
        ax.semilogy(it, img, lw=0.6, color="tab:green", alpha=0.5, label="image term")
        ax.set_xlabel("iteration")
        ax.legend(frameon=False)
        ax.spines[["top", "right"]].set_visible(False)
        _save(fig, path)
