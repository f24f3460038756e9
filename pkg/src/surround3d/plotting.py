"""Training-curve and disparity figures (PNG, headless)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}

LOSS_COLORS = {"L_cls": "tab:blue", "L_box": "tab:orange", "L_d": "tab:green", "L_r": "tab:red", "total": "0.3"}


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    kernel = np.ones(window) / window
    head = np.cumsum(y[: window - 1]) / np.arange(1, window)
    return np.concatenate([head, np.convolve(y, kernel, mode="valid")])


def plot_training_curves(history: list[dict], path, title: str | None = None, smooth: int = 20) -> Path:
    """Loss terms, discriminator accuracy and disparity EPE against step."""
    path = Path(path)
    steps = np.array([r["step"] for r in history], dtype=float)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        ax = axes[0]
        for key, color in LOSS_COLORS.items():
            y = np.array([r[key] for r in history], dtype=float)
            ax.plot(steps, y, color=color, alpha=0.2, lw=0.6)
            ax.plot(steps, _smooth(y, smooth), color=color, lw=1.4, label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(ncol=2, fontsize=7)

        ax = axes[1]
        acc = np.array([r["disc_acc"] for r in history], dtype=float)
        ax.plot(steps, acc, color="tab:red", alpha=0.2, lw=0.6)
        ax.plot(steps, _smooth(acc, smooth), color="tab:red", lw=1.4)
        ax.axhspan(0.35, 0.65, color="0.85", zorder=0)
        ax.set_ylim(0, 1)
        ax.set_xlabel("step")
        ax.set_ylabel("discriminator accuracy")

        ax = axes[2]
        epe = np.array([r["epe"] for r in history], dtype=float)
        ax.plot(steps, epe, color="tab:green", alpha=0.2, lw=0.6)
        ax.plot(steps, _smooth(epe, smooth), color="tab:green", lw=1.4)
        ax.set_xlabel("step")
        ax.set_ylabel("disparity EPE (px)")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_disparity(disparity: np.ndarray, valid: np.ndarray, path, reference: np.ndarray | None = None) -> Path:
    """Disparity map (invalid pixels blank), optionally next to a reference map."""
    path = Path(path)
    shown = np.where(valid, disparity, np.nan)
    panels = [("estimate", shown)]
    if reference is not None:
        panels.append(("reference", np.asarray(reference, dtype=float)))
    vmax = np.nanmax([np.nanmax(p) if np.isfinite(p).any() else 1.0 for _, p in panels])
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.4 * len(panels), 2.8), squeeze=False)
        for ax, (name, img) in zip(axes[0], panels):
            im = ax.imshow(img, cmap="magma", vmin=0, vmax=vmax, interpolation="nearest")
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="disparity (px)")
        fig.savefig(path)
        plt.close(fig)
    return path
