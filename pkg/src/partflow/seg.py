"""Segmentation module: per-point rigid-motion hypotheses, support
prediction, the recurrent part extractor, and graph-cut hardening.

The hypothesis net regresses a residual rotation and translation per
point; the recovered motion is R = project(residual + I) and
t = -(R - I) x + f + residual_t. The support net scores, for every
hypothesis row, how well each point's flow agrees with that motion.
The recurrent extractor repeatedly picks a blend of hypothesis rows
(weights s_t summing to 1 over points), emits the soft segment
y_t = S^T s_t, and keeps a saturating memory of what is already
segmented. Hard labels come from alpha expansion over a KNN graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import graphcut, nn
from . import tensor as T
from .geom import RigidMotion, kabsch_fit, knn, project_to_rotation

INFERENCE_SEGMENT_CAP = 10
UNARY_EPS = 1e-6


@dataclass
class HypothesisSet:
    residual_rot: T.Tensor    # (N, 9) network output, rotation part
    residual_trans: T.Tensor  # (N, 3) network output, translation part
    rotations: np.ndarray     # (N, 3, 3) recovered
    translations: np.ndarray  # (N, 3) recovered
    degenerate: np.ndarray    # (N,) flags where projection was ill-posed


@dataclass
class SupportMatrix:
    values: T.Tensor  # (N, N), row i = support of hypothesis i


@dataclass
class RPENState:
    memory: T.Tensor  # (N,) in [0, 1]
    step: int = 0


@dataclass
class RPENStepOutput:
    code: T.Tensor          # (N, z_dim)
    weights: T.Tensor       # (N,) nonnegative, sums to 1
    continuation: T.Tensor  # scalar in [0, 1]
    indicator: T.Tensor     # (N,) soft segment y_t = S^T s_t


@dataclass
class SegmentationResult:
    soft: np.ndarray                    # (T, N) emitted soft indicators
    continuation: np.ndarray            # (T,)
    labels: np.ndarray                  # (N,) hard labels, compact ids
    motions: List[RigidMotion]
    motion_degenerate: List[bool]
    labels_q: Optional[np.ndarray] = None
    energy: float = 0.0
    init_energy: float = 0.0

    @property
    def n_segments(self):
        return len(self.motions)


@dataclass(frozen=True)
class GraphCutConfig:
    knn_k: int = 10
    sigma: float = 0.05


@dataclass(frozen=True)
class SegSpecs:
    hyp: nn.PointNetPPSpec
    support: nn.PointNetSSpec
    rpen_c: nn.PointNetCSpec
    rpen_pp: nn.PointNetPPSpec
    s_head: nn.PointNetSSpec
    r_head: nn.PointNetCSpec


def build_specs(n_points, width_scale=1.0):
    w = lambda *widths: nn.scale_widths(widths, width_scale)
    c = lambda n: nn.scale_count(n, n_points)
    g = lambda cap: nn.scale_count(cap, n_points, minimum=4)
    hyp = nn.PointNetPPSpec("seg/hyp", (
        nn.SGStage(c(256), 0.2, g(64), w(64, 64, 128)),
        nn.SGStage(c(128), 0.4, g(64), w(128, 128, 256)),
        nn.SGStage(1, None, None, w(256, 512, 1024)),
        nn.IPStage(w(256, 256)),
        nn.IPStage(w(256, 128)),
        nn.IPStage(w(128, 128, 64)),
    ), out_dim=12)
    support = nn.PointNetSSpec("seg/support", agg_widths=w(16, 64, 512),
                               post_widths=w(256, 64, 16), out_dim=1,
                               out_activation="sigmoid")
    rpen_c = nn.PointNetCSpec("seg/rpen_c", widths=w(16, 64, 256))
    rpen_pp = nn.PointNetPPSpec("seg/rpen_pp", (
        nn.SGStage(1, None, None, w(128, 32, 32)),
        nn.IPStage(w(32, 32)),
    ))
    s_head = nn.PointNetSSpec("seg/s_head", agg_widths=w(32, 64),
                              post_widths=w(32, 16), out_dim=1)
    r_head = nn.PointNetCSpec("seg/r_head", widths=w(32, 64),
                              post_widths=w(32,), out_dim=1,
                              out_activation="sigmoid")
    return SegSpecs(hyp, support, rpen_c, rpen_pp, s_head, r_head)


def init_params(store, specs: SegSpecs, rng):
    nn.init_pointnetpp_s(store, specs.hyp, 6, rng)
    nn.init_pointnet_s(store, specs.support, 6, rng)
    code_dim = nn.init_pairnet(store, specs.rpen_c, specs.rpen_pp, 2, rng)
    nn.init_pointnet_s(store, specs.s_head, code_dim, rng)
    nn.init_pointnet_c(store, specs.r_head, code_dim, rng)


# -- hypothesis generation ------------------------------------------------------

def recover_motions(res_rot, res_trans, positions, flow_np):
    """Apply the recovery equations to residual outputs (plain arrays).

    R_i = project(residual_i + I), with identity substituted when the
    projection is degenerate; t_i = -(R_i - I) x_i + f_i + residual_t_i.
    """
    positions = np.asarray(positions, dtype=np.float64)
    res_rot = np.asarray(res_rot, dtype=np.float64).reshape(-1, 3, 3)
    res_trans = np.asarray(res_trans, dtype=np.float64)
    flow_np = np.asarray(flow_np, dtype=np.float64)
    n = positions.shape[0]
    rotations = np.empty((n, 3, 3))
    translations = np.empty((n, 3))
    degenerate = np.zeros(n, dtype=bool)
    for i in range(n):
        r, degen = project_to_rotation(res_rot[i] + np.eye(3))
        if degen:
            r = np.eye(3)
            degenerate[i] = True
        rotations[i] = r
        translations[i] = -(r - np.eye(3)) @ positions[i] + flow_np[i] + res_trans[i]
    return rotations, translations, degenerate


def generate_hypotheses(store, specs: SegSpecs, positions, flow_field, fps_seed=0):
    """Per-point rigid motion hypotheses from positions and flow."""
    positions = np.asarray(positions, dtype=np.float64)
    flow_t = T.astensor(flow_field.vectors if hasattr(flow_field, "vectors") else flow_field)
    if not np.isfinite(flow_t.data).all():
        raise ValueError("generate_hypotheses: non-finite flow")
    feats = T.concat([T.Tensor(positions.astype(np.float32)), flow_t], axis=-1)
    raw = nn.pointnetpp_s(store, specs.hyp, positions, feats, fps_seed=fps_seed)
    res_rot, res_trans = T.split(raw, (9, 3), axis=-1)
    rotations, translations, degenerate = recover_motions(
        res_rot.data, res_trans.data, positions, flow_t.data)
    return HypothesisSet(res_rot, res_trans, rotations, translations, degenerate)


def flow_difference(hyp: HypothesisSet, positions, flow_np):
    """(N, N, 3) of (R_i x_i' + t_i - x_i') - f_i' (plain arrays)."""
    x = np.asarray(positions, dtype=np.float64)
    disp = np.einsum("iab,jb->ija", hyp.rotations, x) + hyp.translations[:, None, :] - x[None, :, :]
    return disp - np.asarray(flow_np, dtype=np.float64)[None, :, :]


def predict_support(store, specs: SegSpecs, hyp: HypothesisSet, positions, flow_field):
    """Probability that each point follows each hypothesis row."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    flow_t = T.astensor(flow_field.vectors if hasattr(flow_field, "vectors") else flow_field)
    if flow_t.shape != (n, 3):
        raise T.ShapeError(f"flow shape {flow_t.shape} does not match {n} points")
    disp = np.einsum("iab,jb->ija", hyp.rotations, positions) \
        + hyp.translations[:, None, :] - positions[None, :, :]
    diff = T.sub(T.Tensor(disp.astype(np.float32)),
                 T.reshape(flow_t, (1, n, 3)))
    pos_wide = np.broadcast_to(positions.astype(np.float32), (n, n, 3))
    stack = T.concat([diff, T.Tensor(np.ascontiguousarray(pos_wide))], axis=-1)
    scores = nn.pointnet_s(store, specs.support, stack)
    return SupportMatrix(T.reshape(scores, (n, n)))


# -- recurrent part extraction ---------------------------------------------------

def initial_state(n):
    return RPENState(memory=T.Tensor(np.zeros(n, dtype=np.float32)), step=0)


def rpen_step(store, specs: SegSpecs, support, state: RPENState):
    """One extraction step; returns (RPENStepOutput, new RPENState)."""
    s_mat = T.astensor(support.values if isinstance(support, SupportMatrix) else support)
    n = s_mat.shape[0]
    mem = state.memory
    pair = T.concat([
        T.reshape(s_mat, (n, n, 1)),
        T.broadcast_to(T.reshape(mem, (1, n, 1)), (n, n, 1)),
    ], axis=-1)
    code = nn.pairnet(store, specs.rpen_c, specs.rpen_pp, pair, np.zeros((n, 3)))
    s_scores = nn.pointnet_s(store, specs.s_head, code)
    weights = T.reshape(T.softmax_rows(T.reshape(s_scores, (1, n))), (n,))
    cont = T.reshape(nn.pointnet_c(store, specs.r_head, code), ())
    indicator = T.reshape(T.matmul(T.transpose(s_mat), T.reshape(weights, (n, 1))), (n,))
    new_mem = T.add(T.mul(T.sub(1.0, mem), indicator), mem)
    out = RPENStepOutput(code, weights, cont, indicator)
    return out, RPENState(memory=new_mem, step=state.step + 1)


def rpen_unroll(store, specs: SegSpecs, support, mode, n_true_parts=None):
    """Run the extractor; training mode unrolls exactly K+2 steps, inference
    stops after the first step whose continuation score drops below 0.5
    (hard cap of 10 segments)."""
    s_mat = support.values if isinstance(support, SupportMatrix) else T.astensor(support)
    n = s_mat.shape[0]
    state = initial_state(n)
    outputs = []
    if mode == "training":
        if n_true_parts is None:
            raise ValueError("training unroll needs the true part count")
        for _ in range(n_true_parts + 2):
            out, state = rpen_step(store, specs, s_mat, state)
            outputs.append(out)
        return outputs
    if mode != "inference":
        raise ValueError(f"unknown unroll mode {mode!r}")
    for _ in range(INFERENCE_SEGMENT_CAP):
        out, state = rpen_step(store, specs, s_mat, state)
        outputs.append(out)
        if float(out.continuation.data) < 0.5:
            break
    return outputs


# -- hardening -------------------------------------------------------------------

def _knn_edges(positions, config: GraphCutConfig):
    n = positions.shape[0]
    k = min(config.knn_k, n - 1)
    nbrs = knn(positions, k)
    pairs = set()
    for i in range(n):
        for j in nbrs[i]:
            pairs.add((min(i, int(j)), max(i, int(j))))
    edges = np.array(sorted(pairs), dtype=np.int64)
    d2 = ((positions[edges[:, 0]] - positions[edges[:, 1]]) ** 2).sum(axis=1)
    weights = np.exp(-d2 / (2.0 * config.sigma ** 2))
    return edges, weights


def _fit_segment_motions(positions, flow_np, labels, n_labels):
    motions, degenerate = [], []
    for lab in range(n_labels):
        idx = np.nonzero(labels == lab)[0]
        seg_flow = flow_np[idx]
        if idx.size < 3:
            motions.append(RigidMotion(np.eye(3), seg_flow.mean(axis=0) if idx.size else np.zeros(3)))
            degenerate.append(True)
            continue
        motion, degen = kabsch_fit(positions[idx], positions[idx] + seg_flow)
        if degen:
            motion = RigidMotion(np.eye(3), seg_flow.mean(axis=0))
        motions.append(motion)
        degenerate.append(bool(degen))
    return motions, degenerate


def harden(outputs, positions, flow_field, config: GraphCutConfig = GraphCutConfig(),
           positions_q=None):
    """Graph-cut hard segmentation plus per-part motions.

    `outputs` is the list of RPEN steps (at least one). When positions of
    the second shape are given, its labels are inferred by transporting P
    through the fitted motions, then refined with the same graph cuts.
    """
    if not outputs:
        raise ValueError("harden needs at least one soft segment")
    positions = np.asarray(positions, dtype=np.float64)
    flow_np = np.asarray(flow_field.vectors.data if hasattr(flow_field, "vectors")
                         else flow_field, dtype=np.float64)
    soft = np.stack([np.asarray(o.indicator.data, dtype=np.float64) for o in outputs])
    cont = np.array([float(o.continuation.data) for o in outputs])
    unary = -np.log(np.clip(soft.T, UNARY_EPS, 1.0))
    edges, weights = _knn_edges(positions, config)
    init = np.argmax(soft, axis=0)
    init_energy = graphcut.potts_energy(unary, edges, weights, init)
    labels, energy = graphcut.alpha_expansion(unary, edges, weights, init)
    if energy > init_energy + 1e-9:
        raise AssertionError("graph cut returned a labeling above the initial energy")
    used = np.unique(labels)
    remap = {int(old): new for new, old in enumerate(used)}
    labels = np.array([remap[int(v)] for v in labels], dtype=np.int64)
    motions, degenerate = _fit_segment_motions(positions, flow_np, labels, len(used))
    labels_q = None
    if positions_q is not None:
        labels_q = _label_second_shape(positions, labels, motions, positions_q, config)
    return SegmentationResult(soft=soft, continuation=cont, labels=labels,
                              motions=motions, motion_degenerate=degenerate,
                              labels_q=labels_q, energy=energy,
                              init_energy=init_energy)


def _label_second_shape(positions, labels, motions, positions_q, config):
    """Label Q by nearest transformed P point, softened into unaries and
    refined by graph cuts on Q's own KNN graph."""
    positions_q = np.asarray(positions_q, dtype=np.float64)
    n_labels = len(motions)
    moved = np.empty_like(positions)
    for lab, motion in enumerate(motions):
        idx = labels == lab
        moved[idx] = motion.apply(positions[idx])
    d2 = np.full((positions_q.shape[0], n_labels), np.inf)
    for lab in range(n_labels):
        pts = moved[labels == lab]
        if pts.size == 0:
            continue
        d = ((positions_q[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        d2[:, lab] = d.min(axis=1)
    prob = np.exp(-d2 / (2.0 * config.sigma ** 2))
    prob = prob / np.maximum(prob.sum(axis=1, keepdims=True), 1e-300)
    unary = -np.log(np.clip(prob, UNARY_EPS, 1.0))
    edges, weights = _knn_edges(positions_q, config)
    init = np.argmin(d2, axis=1)
    labels_q, _ = graphcut.alpha_expansion(unary, edges, weights, init)
    return labels_q
