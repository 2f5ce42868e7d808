"""Correspondence proposal: per-point features, pairwise matching
probabilities, and a per-point correspondence mask.

Both shapes run through the same feature extractor (shared parameters),
every cross-shape feature pair is scored by a small MLP, row softmax
turns scores into matching probabilities, and a PointNetC over each
score row predicts whether that point has any match at all. The refined
matrix is the row-wise product of the two.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .geom import PointCloud, normalization_params

FEATURE_DIM = 64  # per-point descriptor width at reference scale


@dataclass
class MatchMatrix:
    confidences: T.Tensor   # (N, N) raw scores
    probabilities: T.Tensor  # (N, N) row-stochastic


@dataclass
class MaskVector:
    values: T.Tensor  # (N,) in [0, 1]


@dataclass
class RefinedMatchMatrix:
    values: T.Tensor  # (N, N), row i scaled by mask i


@dataclass(frozen=True)
class CorrSpecs:
    feat: nn.PointNetPPSpec
    conf_widths: tuple
    mask: nn.PointNetCSpec
    feature_dim: int


def build_specs(n_points, width_scale=1.0):
    w = lambda *widths: nn.scale_widths(widths, width_scale)
    c = lambda n: nn.scale_count(n, n_points)
    g = lambda cap: nn.scale_count(cap, n_points, minimum=4)
    feat = nn.PointNetPPSpec("corr/feat", (
        nn.SGStage(c(256), 0.2, g(64), w(64, 64, 128)),
        nn.SGStage(c(128), 0.4, g(64), w(128, 128, 256)),
        nn.SGStage(1, None, None, w(256, 512, 1024)),
        nn.IPStage(w(256, 256)),
        nn.IPStage(w(256, 128)),
        nn.IPStage(w(128, 128, 64)),
    ))
    mask = nn.PointNetCSpec("corr/mask", widths=w(32, 64, 128),
                            post_widths=w(128, 64, 32), out_dim=1,
                            out_activation="sigmoid")
    return CorrSpecs(feat=feat, conf_widths=w(128, 128, 128), mask=mask,
                     feature_dim=w(FEATURE_DIM)[0])


def init_params(store, specs: CorrSpecs, rng):
    # absolute positions feed the first stage as base features
    nn.init_pointnetpp_s(store, specs.feat, 3, rng)
    nn.init_mlp(store, "corr/conf", 2 * specs.feature_dim, specs.conf_widths, rng, out_dim=1)
    nn.init_pointnet_c(store, specs.mask, 1, rng)


def extract_features(store, specs: CorrSpecs, pc: PointCloud, fps_seed=0):
    """Per-point descriptors, (N, feature_dim). Shared parameters mean the
    pair order never matters; a warning fires for unnormalized input."""
    _, diag = normalization_params(pc.positions)
    if abs(diag - 1.0) > 0.05:
        # static message so the default warning filter dedups per call site
        warnings.warn("extract_features: cloud bounding-box diagonal deviates "
                      "more than 5% from unit normalization", stacklevel=2)
    base = T.Tensor(pc.positions.astype(np.float32))
    return nn.pointnetpp_s(store, specs.feat, pc.positions, base, fps_seed=fps_seed)


def propose(store, specs: CorrSpecs, feat_p, feat_q):
    """Score all feature pairs; returns (MatchMatrix, MaskVector, RefinedMatchMatrix)."""
    feat_p = T.astensor(feat_p)
    feat_q = T.astensor(feat_q)
    n, d = feat_p.shape
    m, dq = feat_q.shape
    if d != dq:
        raise T.ShapeError(f"feature widths disagree: {d} vs {dq}")
    if n != m:
        raise T.ShapeError(f"point counts disagree: {n} vs {m}")
    left = T.broadcast_to(T.reshape(feat_p, (n, 1, d)), (n, m, d))
    right = T.broadcast_to(T.reshape(feat_q, (1, m, d)), (n, m, d))
    pair = T.concat([left, right], axis=-1)
    conf = T.reshape(nn.mlp(store, "corr/conf", pair, specs.conf_widths, out_dim=1), (n, m))
    probs = T.softmax_rows(conf)
    mask = T.reshape(nn.pointnet_c(store, specs.mask, T.reshape(conf, (n, m, 1))), (n,))
    refined = T.mul(probs, T.reshape(mask, (n, 1)))
    return MatchMatrix(conf, probs), MaskVector(mask), RefinedMatchMatrix(refined)
