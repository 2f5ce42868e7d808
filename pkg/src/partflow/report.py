"""Figure rendering for the CLI report paths.

Every figure lands next to its delimited source file so a run directory
is self-contained: PCC curves, iteration traces, training-loss curves,
and labeled point-cloud scatters.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geom import LABEL_PALETTE

_SAVE_KW = {"dpi": 110, "metadata": {"Software": "partflow"}}


def save_pcc_figure(thresholds, fractions, path, label="ours"):
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    ax.plot(thresholds, fractions, lw=1.6, label=label)
    ax.set_xlabel("error threshold")
    ax.set_ylabel("fraction of correct correspondences")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_trace_figure(trace, path):
    its = [r.iteration for r in trace]
    mags = [r.flow_magnitude for r in trace]
    segs = [r.n_segments for r in trace]
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    ax.plot(its, mags, "o-", lw=1.4, color="tab:blue", label="mean flow magnitude")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean flow magnitude", color="tab:blue")
    ax2 = ax.twinx()
    ax2.step(its, segs, where="mid", color="tab:orange", label="segments")
    ax2.set_ylabel("segments", color="tab:orange")
    ax2.yaxis.get_major_locator().set_params(integer=True)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def parse_training_log(path):
    """Rows of {stage, epoch, term: value} from the structured training log."""
    rows = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or not parts[0].startswith("stage="):
                continue
            row = {}
            for tok in parts:
                if "=" not in tok:
                    continue
                k, v = tok.split("=", 1)
                row[k] = v.rstrip("s")
            rows.append(row)
    return rows


def save_training_curves(log_path, fig_path):
    rows = parse_training_log(log_path)
    if not rows:
        raise ValueError(f"no training rows found in {log_path}")
    terms = sorted({k for row in rows for k in row} - {"stage", "epoch", "wall"})
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    xs = np.arange(len(rows))
    for term in terms:
        ys = [float(row[term]) if term in row else np.nan for row in rows]
        ax.plot(xs, ys, lw=1.3, label=term)
    stage_bounds = [i for i in range(1, len(rows))
                    if rows[i]["stage"] != rows[i - 1]["stage"]]
    for b in stage_bounds:
        ax.axvline(b - 0.5, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("epoch (stage boundaries dashed)")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(fig_path, **_SAVE_KW)
    plt.close(fig)


def save_segmentation_figure(positions, labels, path, title=""):
    positions = np.asarray(positions)
    colors = LABEL_PALETTE[np.asarray(labels) % len(LABEL_PALETTE)] / 255.0
    fig = plt.figure(figsize=(4.0, 4.0))
    ax = fig.add_subplot(projection="3d")
    ax.scatter(positions[:, 0], positions[:, 1], positions[:, 2],
               c=colors, s=8, depthshade=False)
    ax.set_box_aspect((1, 1, 1))
    if title:
        ax.set_title(title, fontsize=9)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
