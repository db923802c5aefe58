"""Per-frame track figures: predicted probability over the reference activity."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import FormatError  # noqa: E402

FRAME_COLUMNS = ("t", "probability", "ground_truth")


@dataclass
class FrameTrack:
    title: str
    t: np.ndarray
    probability: np.ndarray
    ground_truth: np.ndarray | None = None


def write_frames(track: FrameTrack, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(FRAME_COLUMNS)
        for i, (t, p) in enumerate(zip(track.t, track.probability)):
            gt = "" if track.ground_truth is None else int(track.ground_truth[i])
            w.writerow([f"{t:.3f}", f"{p:.6f}", gt])


def read_frames(path, title: str = "") -> FrameTrack:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != FRAME_COLUMNS:
            raise FormatError(f"{path}: expected header {','.join(FRAME_COLUMNS)}")
        rows = list(reader)
    try:
        t = np.array([float(r[0]) for r in rows])
        p = np.array([float(r[1]) for r in rows])
        gts = [r[2] for r in rows]
        gt = None if any(g == "" for g in gts) else np.array([int(g) for g in gts])
    except (ValueError, IndexError):
        raise FormatError(f"{path}: malformed frame row") from None
    return FrameTrack(title or str(path), t, p, gt)


def plot_tracks(tracks, path, threshold: float = 0.5):
    """One panel per track: shaded reference activity, probability curve, threshold line."""
    fig, axes = plt.subplots(len(tracks), 1, figsize=(10, 1.8 * len(tracks) + 0.6), sharex=True,
                             squeeze=False)
    for ax, tr in zip(axes[:, 0], tracks):
        if tr.ground_truth is not None:
            ax.fill_between(tr.t, 0, tr.ground_truth, step="post", color="tab:green", alpha=0.25,
                            label="reference")
        ax.plot(tr.t, tr.probability, color="tab:blue", lw=1.0, label="probability")
        ax.axhline(threshold, color="grey", lw=0.6, ls="--")
        ax.set_ylim(-0.05, 1.05)
        ax.set_ylabel("p")
        ax.set_title(tr.title, fontsize=9, loc="left")
    axes[0, 0].legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
