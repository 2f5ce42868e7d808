"""Multi-task losses, bipartite matching utilities, and the stage-wise
training driver.

Loss terms follow the pipeline's supervision: softmax classification on
matching confidences, binary cross-entropy on the correspondence mask,
squared error on flow, the residual-form motion loss (summed over
same-part correspondence pairs, no SVD on the training path), and the
segmentation triple of support BCE, negative matched relaxed-IoU, and
continuation BCE. Classification-style terms average per element so the
default weights stay balanced across point counts; `reduction="sum"`
restores the raw sums.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import corr as corr_mod
from . import flow as flow_mod
from . import seg as seg_mod
from . import tensor as T

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    d: float = 1.0
    e: float = 0.5
    f: float = 1.0
    g: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: tuple = (100, 100, 100)
    stage3_decay: float = 1e-3
    batch_size: int = 1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    motion_pair_cap: int = 0     # same-part pair subsample per step (0 = all)
    stage3_lr: float = None      # desk override; defaults to learning_rate

    def __post_init__(self):
        if len(self.epochs) != 3 or any(e <= 0 for e in self.epochs):
            raise ValueError("TrainConfig needs three positive epoch counts")


@dataclass
class MatchAssignment:
    mapping: np.ndarray  # mapping[k] = matched prediction index for gt k
    total: float

    def __post_init__(self):
        if len(set(self.mapping.tolist())) != len(self.mapping):
            raise ValueError("assignment must be injective")


# -- correspondence and flow losses ------------------------------------------------

def loss_correspondence(match: corr_mod.MatchMatrix, mask: corr_mod.MaskVector,
                        gt_pairs, gt_unmatched, weights: LossWeights,
                        reduction="mean"):
    """lambda_a * (softmax CE over matched pairs) + lambda_b * (mask BCE)."""
    pairs = np.asarray(gt_pairs, dtype=np.int64).reshape(-1, 2)
    unmatched = np.asarray(gt_unmatched, dtype=np.int64)
    n = match.confidences.shape[0]
    m = match.confidences.shape[1]
    if pairs.size and (pairs[:, 0].min() < 0 or pairs[:, 0].max() >= n
                       or pairs[:, 1].min() < 0 or pairs[:, 1].max() >= m):
        raise IndexError("correspondence pair index out of range")
    if unmatched.size and (unmatched.min() < 0 or unmatched.max() >= n):
        raise IndexError("unmatched index out of range")
    if np.intersect1d(pairs[:, 0], unmatched).size:
        raise ValueError("unmatched set overlaps matched pairs")
    rows = T.gather(match.confidences, pairs[:, 0], axis=0)
    la = T.loss_softmax_ce(rows, pairs[:, 1], reduction=reduction)
    target = np.ones(n)
    target[unmatched] = 0.0
    lb = T.loss_bce(mask.values, T.Tensor(target, dtype=mask.values.dtype),
                    reduction=reduction)
    return T.add(T.mul(la, weights.a), T.mul(lb, weights.b))


def loss_flow(flow_field, gt_flow, lam_c=1.0):
    """lambda_c times the summed squared flow error."""
    vec = flow_field.vectors if hasattr(flow_field, "vectors") else T.astensor(flow_field)
    gt = T.Tensor(np.asarray(gt_flow), dtype=vec.dtype)
    return T.mul(T.loss_squared_l2(vec, gt), lam_c)


def motion_pair_indices(gt_pairs, part_labels, rng=None, cap=0):
    """Ordered index pairs (i, j) over matched points with part(i)=part(j);
    optionally a seeded subsample of at most `cap` pairs."""
    pairs = np.asarray(gt_pairs, dtype=np.int64).reshape(-1, 2)
    labels = np.asarray(part_labels)
    ms = pairs[:, 0]
    same = labels[ms][:, None] == labels[ms][None, :]
    ii, jj = np.nonzero(same)
    if cap and ii.size > cap:
        if rng is None:
            rng = np.random.default_rng(0)
        pick = rng.choice(ii.size, size=cap, replace=False)
        ii, jj = ii[pick], jj[pick]
    return ms[ii], ms[jj]


def loss_motion(hyp: seg_mod.HypothesisSet, flow_field, positions, gt_pairs,
                part_labels, lam_d=1.0, pair_indices=None):
    """Residual-form motion loss summed over same-part correspondence pairs.

    || (f_j - f_i) - (Rhat_i (x_j - x_i) + that_i) ||^2 for matched i, j on
    the same part; gradients reach the residuals and the flow only.
    """
    positions = np.asarray(positions, dtype=np.float64)
    vec = flow_field.vectors if hasattr(flow_field, "vectors") else T.astensor(flow_field)
    if pair_indices is None:
        ii, jj = motion_pair_indices(gt_pairs, part_labels)
    else:
        ii, jj = pair_indices
    if ii.size == 0:
        return T.Tensor(np.zeros((), dtype=vec.dtype))
    delta = (positions[jj] - positions[ii]).astype(np.float32)
    f_i = T.gather(vec, ii, axis=0)
    f_j = T.gather(vec, jj, axis=0)
    rhat = T.reshape(T.gather(hyp.residual_rot, ii, axis=0), (ii.size, 3, 3))
    that = T.gather(hyp.residual_trans, ii, axis=0)
    rotated = T.reshape(T.matmul(rhat, T.Tensor(delta.reshape(ii.size, 3, 1))),
                        (ii.size, 3))
    resid = T.sub(T.sub(f_j, f_i), T.add(rotated, that))
    return T.mul(T.reduce_sum(T.mul(resid, resid)), lam_d)


# -- bipartite matching ---------------------------------------------------------------

def _assignment_value(scores, fixed):
    """Best total over assignments extending `fixed` (gt k -> column)."""
    k_total, t_total = scores.shape
    free_rows = [k for k in range(k_total) if k not in fixed]
    used = set(fixed.values())
    free_cols = [t for t in range(t_total) if t not in used]
    base = sum(scores[k, t] for k, t in fixed.items())
    if not free_rows:
        return base
    sub = scores[np.ix_(free_rows, free_cols)]
    r, c = linear_sum_assignment(-sub)
    return base + sub[r, c].sum()


def hungarian(scores) -> MatchAssignment:
    """Optimal assignment of gt rows to prediction columns, maximizing the
    total score. Ties break to the lexicographically smallest mapping."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("hungarian needs a 2-D score matrix")
    k_total, t_total = scores.shape
    if k_total > t_total:
        raise ValueError(f"more ground-truth rows ({k_total}) than predictions ({t_total})")
    best = _assignment_value(scores, {})
    fixed = {}
    tol = 1e-9 * max(1.0, abs(best))
    for k in range(k_total):
        for t in range(t_total):
            if t in fixed.values():
                continue
            fixed[k] = t
            if _assignment_value(scores, fixed) >= best - tol:
                break
            del fixed[k]
    mapping = np.array([fixed[k] for k in range(k_total)], dtype=np.int64)
    return MatchAssignment(mapping=mapping, total=float(best))


# -- relaxed IoU -----------------------------------------------------------------------

def relaxed_iou(y, y_hat):
    """<y, yhat> / (|y|_1 + |yhat|_1 - <y, yhat>) for soft y, binary yhat."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    inter = float(y @ y_hat)
    denom = float(y.sum() + y_hat.sum() - inter)
    if denom <= 0:
        logger.warning("relaxed_iou: both indicators empty, defining IoU as 0")
        return 0.0
    return inter / denom


def relaxed_iou_tensor(y, y_hat):
    """Differentiable relaxed IoU (y is a tensor, y_hat a binary array)."""
    y = T.astensor(y)
    target = T.Tensor(np.asarray(y_hat), dtype=y.dtype)
    inter = T.reduce_sum(T.mul(y, target))
    denom = T.sub(T.add(T.reduce_sum(y), T.reduce_sum(target)), inter)
    return T.div(inter, denom)


# -- segmentation loss -------------------------------------------------------------------

def loss_segmentation(support: seg_mod.SupportMatrix, outputs, gt_segments,
                      gt_support, weights: LossWeights, return_terms=False):
    """lambda_e * support BCE + lambda_f * (negative matched IoU sum)
    + lambda_g * continuation BCE, for a training unroll of length K+2."""
    gt_segments = np.asarray(gt_segments, dtype=np.float64)
    k = gt_segments.shape[0]
    if len(outputs) != k + 2:
        raise ValueError(f"training unroll must have K+2 = {k + 2} steps, got {len(outputs)}")
    sup = support.values if isinstance(support, seg_mod.SupportMatrix) else T.astensor(support)
    le = T.loss_bce(sup, T.Tensor(np.asarray(gt_support), dtype=sup.dtype))
    scores = np.empty((k, k))
    for gi in range(k):
        for t in range(k):
            scores[gi, t] = relaxed_iou(outputs[t].indicator.data, gt_segments[gi])
    assign = hungarian(scores)
    matched = None
    for gi in range(k):
        term = relaxed_iou_tensor(outputs[assign.mapping[gi]].indicator, gt_segments[gi])
        matched = term if matched is None else T.add(matched, term)
    lf = T.negate(matched)
    cont = T.concat([T.reshape(o.continuation, (1,)) for o in outputs], axis=0)
    # continue for the first K-1 steps, stop from step K on (1-indexed)
    target = np.zeros(k + 2)
    target[:k - 1] = 1.0
    lg = T.loss_bce(cont, T.Tensor(target, dtype=cont.dtype))
    total = T.add(T.add(T.mul(le, weights.e), T.mul(lf, weights.f)),
                  T.mul(lg, weights.g))
    if return_terms:
        return total, {"le": float(le.data), "lf": float(lf.data), "lg": float(lg.data)}
    return total


# -- stage-wise training ---------------------------------------------------------------

STAGE_PREFIXES = {
    1: ("corr/", "flow/"),
    2: ("seg/hyp", "seg/support"),
    3: None,  # everything
}


def _gt_flow_field(sample):
    return flow_mod.FlowField(T.Tensor(np.asarray(sample.flow, dtype=np.float32)))


def stage1_loss(model, sample, weights: LossWeights):
    out = model.flow_pass(sample.p, sample.q)
    l_corr = loss_correspondence(out["match"], out["mask"], sample.pairs,
                                 sample.unmatched, weights)
    l_flow = loss_flow(out["flow"], sample.flow, weights.c)
    total = T.add(l_corr, l_flow)
    return total, {"corr": float(l_corr.data), "flow": float(l_flow.data)}


def stage2_loss(model, sample, weights: LossWeights, pair_rng=None, pair_cap=0):
    ff = _gt_flow_field(sample)
    hyp = seg_mod.generate_hypotheses(model.store, model.seg, sample.p.positions, ff)
    support = seg_mod.predict_support(model.store, model.seg, hyp,
                                      sample.p.positions, ff)
    idx = motion_pair_indices(sample.pairs, sample.p.labels, rng=pair_rng, cap=pair_cap)
    l_motion = loss_motion(hyp, ff, sample.p.positions, sample.pairs,
                           sample.p.labels, weights.d, pair_indices=idx)
    le = T.mul(T.loss_bce(support.values,
                          T.Tensor(support_target(sample.p.labels),
                                   dtype=support.values.dtype)), weights.e)
    total = T.add(l_motion, le)
    return total, {"motion": float(l_motion.data), "le": float(le.data)}


def stage3_loss(model, sample, weights: LossWeights, pair_rng=None, pair_cap=0):
    out = model.flow_pass(sample.p, sample.q)
    l_corr = loss_correspondence(out["match"], out["mask"], sample.pairs,
                                 sample.unmatched, weights)
    l_flow = loss_flow(out["flow"], sample.flow, weights.c)
    seg_out = model.seg_pass(sample.p.positions, out["flow"], mode="training",
                             n_true_parts=sample.n_parts)
    idx = motion_pair_indices(sample.pairs, sample.p.labels, rng=pair_rng, cap=pair_cap)
    l_motion = loss_motion(seg_out["hyp"], out["flow"], sample.p.positions,
                           sample.pairs, sample.p.labels, weights.d, pair_indices=idx)
    l_seg = loss_segmentation(seg_out["support"], seg_out["outputs"],
                              segment_indicators(sample.p.labels),
                              support_target(sample.p.labels), weights)
    total = T.add(T.add(l_corr, l_flow), T.add(l_motion, l_seg))
    return total, {"corr": float(l_corr.data), "flow": float(l_flow.data),
                   "motion": float(l_motion.data), "seg": float(l_seg.data)}


def _stage_learning_rate(config, stage, step, total_steps):
    if stage < 3:
        return config.learning_rate
    base = config.stage3_lr if config.stage3_lr is not None else config.learning_rate
    if total_steps <= 1:
        return base
    # exponential decay toward base * stage3_decay over the stage
    frac = step / max(1, total_steps - 1)
    return base * (config.stage3_decay ** frac)


def train_stagewise(model, samples, config: TrainConfig, out_dir=None,
                    log_fh=None, stages=(1, 2, 3)):
    """Run the stage-wise schedule; returns per-stage checkpoint paths.

    Stage 1 trains correspondence + flow, stage 2 trains hypothesis +
    support on ground-truth flow, stage 3 trains everything end to end
    with a decayed learning rate. One Adam step per pair (batch size 1,
    per-pair gradient accumulation is the batch dimension).
    """
    from pathlib import Path
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    loss_fns = {1: stage1_loss, 2: stage2_loss, 3: stage3_loss}
    written = {}
    for stage in stages:
        n_epochs = config.epochs[stage - 1]
        params = model.trainable(STAGE_PREFIXES[stage])
        state = T.AdamState()
        total_steps = n_epochs * len(samples)
        step = 0
        for epoch in range(n_epochs):
            t0 = time.time()
            order_rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, stage, epoch]))
            order = order_rng.permutation(len(samples))
            sums = {}
            for si in order:
                sample = samples[si]
                for p in params.values():
                    p.zero_grad()
                if stage == 1:
                    loss, terms = stage1_loss(model, sample, config.weights)
                else:
                    pair_rng = np.random.default_rng(
                        np.random.SeedSequence([config.seed, stage, epoch, int(si)]))
                    loss, terms = loss_fns[stage](model, sample, config.weights,
                                                  pair_rng=pair_rng,
                                                  pair_cap=config.motion_pair_cap)
                T.backward(loss)
                lr = _stage_learning_rate(config, stage, step, total_steps)
                T.adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
                step += 1
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + v
            means = {k: v / len(samples) for k, v in sums.items()}
            row = " ".join(f"{k}={v:.6f}" for k, v in sorted(means.items()))
            line = f"stage={stage} epoch={epoch} {row} wall={time.time() - t0:.2f}s"
            logger.info(line)
            if log_fh is not None:
                log_fh.write(line + "\n")
                log_fh.flush()
        if out is not None:
            path = out / f"stage{stage}.ptfl"
            model.save(path)
            written[stage] = path
    if out is not None:
        final = out / "final.ptfl"
        model.save(final)
        written["final"] = final
    return written


def segment_indicators(labels, n_points=None):
    """Binary (K, N) indicator matrix from integer part labels."""
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.unique(labels)
    out = np.zeros((ids.size, n_points or labels.size))
    for row, lab in enumerate(ids):
        out[row, labels == lab] = 1.0
    return out


def support_target(labels):
    """Binary (N, N) same-part matrix from part labels."""
    labels = np.asarray(labels)
    return (labels[:, None] == labels[None, :]).astype(np.float64)
