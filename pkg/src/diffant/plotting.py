"""Figure emitters. Every image gets the data it was drawn from as a CSV next to it."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _atomic_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _save(fig, path: Path):
    buf = io.BytesIO()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(buf, format=path.suffix.lstrip(".") or "png", dpi=100,
                metadata={"Software": None} if path.suffix in ("", ".png") else None)
    plt.close(fig)
    _atomic_bytes(path, buf.getvalue())


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _atomic_bytes(path, buf.getvalue().encode())


def plot_step_curve(steps, series: dict, path, ylabel="MoC"):
    """Metric against inference step, x axis running from the first (noisiest) step down to 1."""
    path = Path(path)
    steps = list(steps)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, values in series.items():
        ax.plot(steps, values, marker="o", ms=3, label=name)
    ax.set_xlabel("inference step")
    ax.set_ylabel(ylabel)
    ax.invert_xaxis()
    ax.grid(alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    _save(fig, path)
    names = list(series)
    _write_csv(path.with_suffix(".csv"), ["step"] + names,
               [[s] + [f"{series[n][i]:.6f}" for n in names] for i, s in enumerate(steps)])
    return path


def plot_timelines(rows, path, num_classes: int, class_names=None, title=None):
    """One horizontal strip per (name, frame labels) row, colored by class."""
    path = Path(path)
    if not rows:
        raise ValueError("nothing to plot")
    cmap = plt.get_cmap("tab20", max(num_classes, 2))
    H = max(len(f) for _, f in rows)
    fig, ax = plt.subplots(figsize=(8, 0.45 * len(rows) + 0.8))
    for i, (_, frames) in enumerate(rows):
        img = np.asarray(frames, dtype=float)[None, :]
        ax.imshow(img, aspect="auto", cmap=cmap, vmin=-0.5, vmax=num_classes - 0.5,
                  extent=(0, len(frames), i + 0.9, i + 0.1), interpolation="nearest")
    ax.set_ylim(len(rows), 0)
    ax.set_xlim(0, H)
    ax.set_yticks([i + 0.5 for i in range(len(rows))])
    ax.set_yticklabels([name for name, _ in rows])
    ax.set_xlabel("future frame")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    out = []
    for name, frames in rows:
        labels = [class_names[c] if class_names else str(c) for c in frames]
        out.append([name, " ".join(labels)])
    _write_csv(path.with_suffix(".csv"), ["row", "frames"], out)
    return path


def plot_bars(labels, values, path, ylabel="score", title=None):
    """Bar chart of one value per label, e.g. per-class accuracy or mAP splits."""
    path = Path(path)
    labels, values = [str(x) for x in labels], [float(v) for v in values]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.4 * len(labels) + 1.5), 3.5))
    ax.bar(range(len(values)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45 if len(labels) > 6 else 0, ha="right" if len(labels) > 6 else "center")
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    _write_csv(path.with_suffix(".csv"), ["label", ylabel], [[k, f"{v:.6f}"] for k, v in zip(labels, values)])
    return path


def plot_m_curve(ms, values, path, ylabel="MoC", title=None):
    """Metric against the number of samples m."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(list(ms), list(values), marker="o")
    ax.set_xlabel("samples m")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    _write_csv(path.with_suffix(".csv"), ["m", ylabel], [[m, f"{v:.6f}"] for m, v in zip(ms, values)])
    return path
