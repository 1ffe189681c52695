"""Figures and quick-look images written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FRAME_INTERVAL = 3


def write_pgm(path: str | Path, frame: np.ndarray) -> None:
    """Binary 8-bit PGM of a [0, 1] frame."""
    img = np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return pixels.astype(np.float64) / maxval


def _save(fig, path) -> Path:
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_metric_curves(steps: dict[str, list[float]], path: str | Path, title: str = "") -> Path:
    names = list(steps)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3))
    axes = np.atleast_1d(axes)
    for ax, name in zip(axes, names):
        ys = np.asarray(steps[name], dtype=np.float64)
        ax.plot(np.arange(1, len(ys) + 1), ys, marker="o", ms=3)
        ax.set_title(name)
        ax.set_xlabel("step")
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curves(train: list[tuple[int, float]], val: list[tuple[int, float]], path: str | Path) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    if train:
        it, loss = zip(*train)
        a.plot(it, loss, lw=0.8)
    a.set_xlabel("iteration")
    a.set_ylabel("training loss")
    if val:
        ep, vl = zip(*val)
        b.plot(ep, vl, marker="o")
    b.set_xlabel("epoch")
    b.set_ylabel("validation loss")
    for ax in (a, b):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_frame_grid(rows: dict[str, np.ndarray], path: str | Path, interval: int = FRAME_INTERVAL) -> Path:
    """One row per labelled ``T x H x W`` stack, showing every ``interval``-th frame."""
    picked = {k: np.asarray(v)[interval - 1::interval] if len(v) >= interval else np.asarray(v) for k, v in rows.items()}
    ncol = max(len(v) for v in picked.values())
    fig, axes = plt.subplots(len(picked), ncol, figsize=(1.3 * ncol, 1.4 * len(picked)), squeeze=False)
    for r, (label, frames) in enumerate(picked.items()):
        for c in range(ncol):
            ax = axes[r, c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c < len(frames):
                ax.imshow(frames[c], cmap="gray", vmin=0, vmax=1)
            else:
                ax.axis("off")
        axes[r, 0].set_ylabel(label, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
