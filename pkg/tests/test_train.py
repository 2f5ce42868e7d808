import itertools
import math

import numpy as np
import pytest

from partflow import corr, seg, train
from partflow import tensor as T
from partflow.geom import rot_exp

W = train.LossWeights()


def make_match(conf):
    conf_t = T.Tensor(np.asarray(conf, dtype=np.float32))
    return corr.MatchMatrix(conf_t, T.softmax_rows(conf_t))


def make_mask(values):
    return corr.MaskVector(T.Tensor(np.asarray(values, dtype=np.float32)))


# -- correspondence loss ---------------------------------------------------------

def test_la_perfect_confidences_near_zero():
    n = 6
    conf = np.full((n, n), -30.0)
    np.fill_diagonal(conf, 30.0)
    pairs = np.stack([np.arange(n), np.arange(n)], axis=1)
    loss = train.loss_correspondence(make_match(conf), make_mask(np.ones(n)),
                                     pairs, [], W)
    # mask BCE against all-ones targets is ~0 too
    assert float(loss.data) < 1e-4


def test_la_uniform_confidences_sum_value():
    n = 8
    pairs = np.stack([np.arange(n), np.arange(n)], axis=1)
    loss = train.loss_correspondence(make_match(np.zeros((n, n))),
                                     make_mask(np.ones(n) - 1e-7),
                                     pairs, [], W, reduction="sum")
    assert float(loss.data) == pytest.approx(n * math.log(n), abs=1e-3)
    loss_mean = train.loss_correspondence(make_match(np.zeros((n, n))),
                                          make_mask(np.ones(n) - 1e-7),
                                          pairs, [], W, reduction="mean")
    assert float(loss_mean.data) == pytest.approx(math.log(n), abs=1e-3)


def test_lb_exact_mask_near_zero():
    n = 5
    unmatched = np.array([1, 3])
    mask = np.ones(n) - 1e-7
    mask[unmatched] = 1e-7
    conf = np.full((n, n), -30.0)
    matched = np.array([0, 2, 4])
    conf[matched, matched] = 30.0
    pairs = np.stack([matched, matched], axis=1)
    loss = train.loss_correspondence(make_match(conf), make_mask(mask),
                                     pairs, unmatched, W)
    assert float(loss.data) < 1e-4


def test_correspondence_rejects_bad_indices():
    match, mask = make_match(np.zeros((4, 4))), make_mask(np.ones(4))
    with pytest.raises(IndexError):
        train.loss_correspondence(match, mask, [[0, 9]], [], W)
    with pytest.raises(ValueError):
        train.loss_correspondence(match, mask, [[1, 1]], [1], W)


# -- flow loss --------------------------------------------------------------------

def test_flow_loss_zero_on_match():
    f = T.Tensor(np.arange(6.0).reshape(2, 3))
    assert float(train.loss_flow(f, f.data).data) == 0.0


def test_flow_loss_single_point():
    f = T.Tensor([[1.0, 0.0, 0.0]])
    assert float(train.loss_flow(f, np.zeros((1, 3)), lam_c=2.0).data) == pytest.approx(2.0)


def test_flow_loss_two_points_hand_sum():
    f = T.Tensor([[1.0, 0, 0], [0, 2.0, 0]])
    assert float(train.loss_flow(f, np.zeros((2, 3))).data) == pytest.approx(5.0)


# -- motion loss ------------------------------------------------------------------

def hyp_from_arrays(res_rot, res_trans):
    n = res_rot.shape[0]
    return seg.HypothesisSet(
        residual_rot=T.Tensor(res_rot.reshape(n, 9).astype(np.float64)),
        residual_trans=T.Tensor(res_trans.astype(np.float64)),
        rotations=np.stack([np.eye(3)] * n),
        translations=np.zeros((n, 3)),
        degenerate=np.zeros(n, dtype=bool),
    )


def test_motion_loss_zero_for_pure_translation():
    rng = np.random.default_rng(0)
    n = 7
    pos = rng.normal(size=(n, 3))
    flow = np.tile([0.2, -0.1, 0.4], (n, 1))  # constant per (single) part
    pairs = np.stack([np.arange(n), np.arange(n)], axis=1)
    hyp = hyp_from_arrays(np.zeros((n, 3, 3)), np.zeros((n, 3)))
    loss = train.loss_motion(hyp, T.Tensor(flow), pos, pairs, np.zeros(n, dtype=int))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-12)


def test_motion_loss_zero_for_exact_rotation_residual():
    rng = np.random.default_rng(1)
    n = 6
    pos = rng.normal(size=(n, 3))
    r = rot_exp(np.array([0.0, 0.0, 0.05]))
    flow = pos @ r.T - pos
    pairs = np.stack([np.arange(n), np.arange(n)], axis=1)
    res_rot = np.tile(r - np.eye(3), (n, 1, 1))
    hyp = hyp_from_arrays(res_rot, np.zeros((n, 3)))
    loss = train.loss_motion(hyp, T.Tensor(flow), pos, pairs, np.zeros(n, dtype=int))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-10)


def test_motion_loss_matches_double_loop_oracle():
    rng = np.random.default_rng(2)
    n = 9
    pos = rng.normal(size=(n, 3))
    flow = rng.normal(size=(n, 3))
    labels = rng.integers(0, 3, size=n)
    res_rot = rng.normal(scale=0.3, size=(n, 3, 3))
    res_trans = rng.normal(scale=0.1, size=(n, 3))
    perm = rng.permutation(n)
    pairs = np.stack([np.arange(n), perm], axis=1)
    hyp = hyp_from_arrays(res_rot, res_trans)
    got = float(train.loss_motion(hyp, T.Tensor(flow), pos, pairs, labels, lam_d=1.5).data)
    expect = 0.0
    for p, _ in pairs:
        for pp, _ in pairs:
            if labels[pp] != labels[p]:
                continue
            term = (flow[pp] - flow[p]) - (res_rot[p] @ (pos[pp] - pos[p]) + res_trans[p])
            expect += float(term @ term)
    assert got == pytest.approx(1.5 * expect, rel=1e-6)


# -- hungarian ----------------------------------------------------------------------

def brute_force_assign(scores):
    k, t = scores.shape
    best = -np.inf
    for cols in itertools.permutations(range(t), k):
        val = sum(scores[i, c] for i, c in enumerate(cols))
        if val > best:
            best = val
    return best


def test_hungarian_identity_dominant():
    scores = np.eye(4) * 10 + 0.1
    out = train.hungarian(scores)
    np.testing.assert_array_equal(out.mapping, [0, 1, 2, 3])


def test_hungarian_swap_case():
    out = train.hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
    np.testing.assert_array_equal(out.mapping, [1, 0])
    assert out.total == pytest.approx(4.0)


def test_hungarian_matches_brute_force_200_trials():
    rng = np.random.default_rng(3)
    for _ in range(200):
        k = int(rng.integers(1, 7))
        t = int(rng.integers(k, 8))
        scores = rng.normal(size=(k, t))
        out = train.hungarian(scores)
        assert out.total == pytest.approx(brute_force_assign(scores), abs=1e-9)
        assert len(set(out.mapping.tolist())) == k


def test_hungarian_lexicographic_ties():
    out = train.hungarian(np.ones((3, 5)))
    np.testing.assert_array_equal(out.mapping, [0, 1, 2])


def test_hungarian_rejects_too_many_rows():
    with pytest.raises(ValueError):
        train.hungarian(np.ones((3, 2)))


# -- relaxed IoU ----------------------------------------------------------------------

def test_relaxed_iou_binary_equal():
    y = np.array([1.0, 0, 1, 1])
    assert train.relaxed_iou(y, y) == pytest.approx(1.0)


def test_relaxed_iou_half_everywhere():
    n = 10
    assert train.relaxed_iou(np.full(n, 0.5), np.ones(n)) == pytest.approx(0.5)


def test_relaxed_iou_disjoint():
    assert train.relaxed_iou([1.0, 0, 0], [0.0, 1, 0]) == 0.0


def test_relaxed_iou_empty_warns():
    assert train.relaxed_iou(np.zeros(3), np.zeros(3)) == 0.0


def test_relaxed_iou_equals_hard_iou_on_binary():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a = rng.integers(0, 2, size=12).astype(float)
        b = rng.integers(0, 2, size=12).astype(float)
        inter = np.sum((a > 0) & (b > 0))
        union = np.sum((a > 0) | (b > 0))
        hard = inter / union if union else 0.0
        assert train.relaxed_iou(a, b) == pytest.approx(hard, abs=1e-12)


def test_relaxed_iou_tensor_matches_and_differentiates():
    rng = np.random.default_rng(5)
    y = rng.uniform(0.01, 0.99, size=8)
    y_hat = rng.integers(0, 2, size=8).astype(float)
    y_hat[0] = 1.0
    t = T.Tensor(y, requires_grad=True)
    out = train.relaxed_iou_tensor(t, y_hat)
    assert float(out.data) == pytest.approx(train.relaxed_iou(y, y_hat), rel=1e-9)
    params = {"y": T.Tensor(y.copy(), requires_grad=True)}
    T.gradcheck(lambda p: train.relaxed_iou_tensor(p["y"], y_hat), params, tol=1e-4)


# -- segmentation loss -----------------------------------------------------------------

class FakeStep:
    def __init__(self, indicator, continuation):
        self.indicator = T.Tensor(np.asarray(indicator, dtype=np.float64))
        self.continuation = T.Tensor(np.float64(continuation))


def crisp(v, eps=1e-7):
    return np.clip(np.asarray(v, dtype=float), eps, 1 - eps)


def test_perfect_support_le_near_zero():
    labels = np.array([0, 0, 1, 1])
    gt = train.support_target(labels)
    sup = seg.SupportMatrix(T.Tensor(crisp(gt)))
    segs = train.segment_indicators(labels)
    outs = [FakeStep(crisp(segs[0]), 1.0 - 1e-7), FakeStep(crisp(segs[1]), 1e-7),
            FakeStep(crisp(np.zeros(4)), 1e-7), FakeStep(crisp(np.zeros(4)), 1e-7)]
    total, terms = train.loss_segmentation(sup, outs, segs, gt, W, return_terms=True)
    assert terms["le"] == pytest.approx(0.0, abs=1e-5)


def test_lf_is_minus_k_for_perfect_segments_any_order():
    labels = np.array([0, 0, 1, 1, 1])
    gt = train.support_target(labels)
    segs = train.segment_indicators(labels)
    # predictions in swapped order, still perfect
    outs = [FakeStep(segs[1], 1.0 - 1e-7), FakeStep(segs[0], 1e-7),
            FakeStep(np.zeros(5), 1e-7), FakeStep(np.zeros(5), 1e-7)]
    sup = seg.SupportMatrix(T.Tensor(crisp(gt)))
    _, terms = train.loss_segmentation(sup, outs, segs, gt, W, return_terms=True)
    assert terms["lf"] == pytest.approx(-2.0, abs=1e-9)


def test_lg_near_zero_for_correct_continuation():
    labels = np.array([0, 0, 1, 1])
    gt = train.support_target(labels)
    segs = train.segment_indicators(labels)
    # K = 2: continue on step 1, stop from step 2 on
    outs = [FakeStep(segs[0], 1.0 - 1e-7), FakeStep(segs[1], 1e-7),
            FakeStep(np.zeros(4), 1e-7), FakeStep(np.zeros(4), 1e-7)]
    sup = seg.SupportMatrix(T.Tensor(crisp(gt)))
    _, terms = train.loss_segmentation(sup, outs, segs, gt, W, return_terms=True)
    assert terms["lg"] == pytest.approx(0.0, abs=1e-5)


def test_segmentation_loss_rejects_wrong_unroll_length():
    labels = np.array([0, 1])
    segs = train.segment_indicators(labels)
    sup = seg.SupportMatrix(T.Tensor(crisp(train.support_target(labels))))
    outs = [FakeStep(np.zeros(2), 0.5)] * 3
    with pytest.raises(ValueError):
        train.loss_segmentation(sup, outs, segs, train.support_target(labels), W)


def test_segmentation_loss_gradcheck():
    rng = np.random.default_rng(6)
    n, k = 6, 2
    labels = np.array([0, 0, 0, 1, 1, 1])
    gt_segments = train.segment_indicators(labels)
    gt_support = train.support_target(labels)
    # indicators clearly aligned with distinct segments keep the bipartite
    # matching stable under the finite-difference perturbations
    y0 = 0.7 * gt_segments + 0.1 + rng.uniform(0, 0.05, size=(k, n))
    extra = rng.uniform(0.05, 0.15, size=(2, n))
    params = {
        "sup": T.Tensor(rng.uniform(0.2, 0.8, size=(n, n)), requires_grad=True),
        "y": T.Tensor(np.concatenate([y0, extra]), requires_grad=True),
        "r": T.Tensor(rng.uniform(0.2, 0.8, size=k + 2), requires_grad=True),
    }

    def fn(p):
        outs = []
        for t in range(k + 2):
            row = T.gather(p["y"], [t], axis=0)
            rt = T.gather(p["r"], [t], axis=0)
            step = FakeStep(np.zeros(n), 0.5)
            step.indicator = T.reshape(row, (n,))
            step.continuation = T.reshape(rt, ())
            outs.append(step)
        return train.loss_segmentation(seg.SupportMatrix(p["sup"]), outs,
                                       gt_segments, gt_support, W)

    worst = T.gradcheck(fn, params, tol=1e-3)
    assert worst < 1e-3


def test_loss_weight_defaults():
    assert (W.a, W.b, W.c, W.d) == (1.0, 1.0, 1.0, 1.0)
    assert (W.e, W.f, W.g) == (0.5, 1.0, 1.0)
