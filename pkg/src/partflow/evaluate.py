"""Metrics (EPE, PCC, Rand index, per-part IoU) and the classical
sequential-RANSAC motion segmentation baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .geom import RigidMotion, kabsch_fit
from .train import hungarian

DEFAULT_PCC_MAX = 0.25
DEFAULT_PCC_STEPS = 50


def epe(flow, flow_gt):
    """Mean Euclidean norm of the per-point flow error."""
    flow = np.asarray(flow, dtype=np.float64)
    flow_gt = np.asarray(flow_gt, dtype=np.float64)
    if flow.shape != flow_gt.shape:
        raise ValueError(f"flow shapes disagree: {flow.shape} vs {flow_gt.shape}")
    return float(np.linalg.norm(flow - flow_gt, axis=1).mean())


def pcc_curve(flow, flow_gt, thresholds=None):
    """Fraction of points with error below each threshold (non-decreasing)."""
    if thresholds is None:
        thresholds = np.linspace(0.0, DEFAULT_PCC_MAX, DEFAULT_PCC_STEPS)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if (np.diff(thresholds) < 0).any():
        raise ValueError("thresholds must be sorted ascending")
    err = np.linalg.norm(np.asarray(flow) - np.asarray(flow_gt), axis=1)
    fractions = (err[None, :] <= thresholds[:, None]).mean(axis=1)
    return thresholds, fractions


def rand_index(labels_a, labels_b):
    """Fraction of unordered point pairs on which two clusterings agree."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("label arrays must have equal length")
    n = a.size
    if n < 2:
        return 1.0
    same_a = a[:, None] == a[None, :]
    same_b = b[:, None] == b[None, :]
    agree = same_a == same_b
    iu = np.triu_indices(n, k=1)
    return float(agree[iu].mean())


def hard_iou(mask_a, mask_b):
    inter = np.logical_and(mask_a, mask_b).sum()
    union = np.logical_or(mask_a, mask_b).sum()
    return float(inter / union) if union else 0.0


def per_part_iou(pred_labels, gt_labels):
    """Mean IoU of ground-truth parts under the optimal bipartite matching;
    ground-truth parts without a match count as 0."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    gt_ids = np.unique(gt)
    pred_ids = np.unique(pred)
    k, t = gt_ids.size, pred_ids.size
    scores = np.zeros((k, t))
    for i, gi in enumerate(gt_ids):
        for j, pj in enumerate(pred_ids):
            scores[i, j] = hard_iou(gt == gi, pred == pj)
    if k <= t:
        assign = hungarian(scores)
        total = sum(scores[i, assign.mapping[i]] for i in range(k))
    else:
        assign = hungarian(scores.T)
        total = sum(scores[assign.mapping[j], j] for j in range(t))
    return float(total / k)


# -- sequential RANSAC baseline ---------------------------------------------------

@dataclass(frozen=True)
class RansacConfig:
    inlier_tau: float = 0.05
    samples_per_round: int = 256
    max_rounds: int = 10
    min_remaining_frac: float = 0.05
    seed: int = 0


@dataclass
class RansacResult:
    labels: np.ndarray
    motions: List[RigidMotion]
    rounds: int

    @property
    def n_segments(self):
        return len(self.motions)


def _support(motion, positions, targets, tau):
    resid = np.linalg.norm(motion.apply(positions) - targets, axis=1)
    return resid <= tau


def seq_ransac(positions, flow, config: RansacConfig = RansacConfig()) -> RansacResult:
    """Repeatedly extract the dominant rigid motion mode from the flow.

    Each round samples minimal 3-point sets, fits rigid motions onto the
    flow targets, keeps the motion with the largest support, refits on its
    inliers and removes them. Stops at the round cap, when the remainder
    drops below the configured fraction, or when fewer than 3 points are
    left; leftover points join the motion with the smallest residual.
    """
    positions = np.asarray(positions, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    n = positions.shape[0]
    targets = positions + flow
    rng = np.random.default_rng(config.seed)
    labels = np.full(n, -1, dtype=np.int64)
    motions: List[RigidMotion] = []
    remaining = np.arange(n)
    rounds = 0
    while rounds < config.max_rounds:
        if remaining.size < 3 or remaining.size < config.min_remaining_frac * n:
            break
        rounds += 1
        best_count = 0
        best_motion = None
        for _ in range(config.samples_per_round):
            tri = rng.choice(remaining, size=3, replace=False)
            motion, degen = kabsch_fit(positions[tri], targets[tri])
            if degen:
                continue
            count = int(_support(motion, positions[remaining],
                                 targets[remaining], config.inlier_tau).sum())
            if count > best_count:
                best_count = count
                best_motion = motion
        if best_motion is None or best_count < 3:
            break
        inlier_mask = _support(best_motion, positions[remaining],
                               targets[remaining], config.inlier_tau)
        inliers = remaining[inlier_mask]
        refit, degen = kabsch_fit(positions[inliers], targets[inliers])
        if not degen:
            best_motion = refit
            refined = _support(best_motion, positions[remaining],
                               targets[remaining], config.inlier_tau)
            if refined.sum() >= 3:
                inliers = remaining[refined]
        labels[inliers] = len(motions)
        motions.append(best_motion)
        remaining = remaining[labels[remaining] < 0]
    if not motions:
        motion, _ = kabsch_fit(positions, targets)
        motions.append(motion)
        labels[:] = 0
        return RansacResult(labels, motions, rounds)
    leftover = np.nonzero(labels < 0)[0]
    if leftover.size:
        resid = np.stack([
            np.linalg.norm(m.apply(positions[leftover]) - targets[leftover], axis=1)
            for m in motions])
        labels[leftover] = resid.argmin(axis=0)
    return RansacResult(labels, motions, rounds)


# -- reports ----------------------------------------------------------------------

@dataclass
class MetricsReport:
    pair_epe: List[float] = field(default_factory=list)
    pair_ri: List[float] = field(default_factory=list)
    pair_iou: List[float] = field(default_factory=list)
    pcc_thresholds: Optional[np.ndarray] = None
    pcc_fractions: Optional[np.ndarray] = None

    def add_pair(self, epe_value=None, ri=None, iou=None):
        if epe_value is not None:
            self.pair_epe.append(float(epe_value))
        if ri is not None:
            self.pair_ri.append(float(ri))
        if iou is not None:
            self.pair_iou.append(float(iou))

    @property
    def mean_epe(self):
        return float(np.mean(self.pair_epe)) if self.pair_epe else float("nan")

    @property
    def mean_ri(self):
        return float(np.mean(self.pair_ri)) if self.pair_ri else float("nan")

    @property
    def mean_iou(self):
        return float(np.mean(self.pair_iou)) if self.pair_iou else float("nan")

    def to_text(self, name="ours"):
        lines = ["pair\tepe\tri\tiou"]
        count = max(len(self.pair_epe), len(self.pair_ri), len(self.pair_iou))
        for i in range(count):
            e = f"{self.pair_epe[i]:.6f}" if i < len(self.pair_epe) else "-"
            r = f"{self.pair_ri[i]:.4f}" if i < len(self.pair_ri) else "-"
            u = f"{self.pair_iou[i]:.4f}" if i < len(self.pair_iou) else "-"
            lines.append(f"{i}\t{e}\t{r}\t{u}")
        ri_iou = f"{100 * self.mean_ri:.1f}/{100 * self.mean_iou:.1f}"
        lines.append(f"# {name}: EPE {self.mean_epe:.6f}  RI/IoU {ri_iou}")
        return "\n".join(lines) + "\n"

    def write(self, path, name="ours"):
        with open(path, "w") as fh:
            fh.write(self.to_text(name))

    def write_pcc(self, path):
        if self.pcc_thresholds is None:
            raise ValueError("no PCC curve recorded")
        with open(path, "w") as fh:
            for t, f in zip(self.pcc_thresholds, self.pcc_fractions):
                fh.write(f"{t:.6f} {f:.6f}\n")
