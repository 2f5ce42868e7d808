import itertools

import numpy as np
import pytest

from partflow import evaluate
from partflow.geom import rot_exp


# -- EPE ---------------------------------------------------------------------

def test_epe_zero_on_match():
    f = np.random.default_rng(0).normal(size=(7, 3))
    assert evaluate.epe(f, f) == 0.0


def test_epe_half_for_one_of_two_points():
    f = np.zeros((2, 3))
    g = np.zeros((2, 3))
    g[0, 0] = 1.0
    assert evaluate.epe(f, g) == pytest.approx(0.5)


def test_epe_matches_loop_oracle():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(9, 3))
    g = rng.normal(size=(9, 3))
    expect = sum(float(np.sqrt(((f[i] - g[i]) ** 2).sum())) for i in range(9)) / 9
    assert evaluate.epe(f, g) == pytest.approx(expect, rel=1e-12)


# -- PCC ---------------------------------------------------------------------

def test_pcc_exact_flow_is_one_at_zero():
    f = np.random.default_rng(2).normal(size=(5, 3))
    thr, frac = evaluate.pcc_curve(f, f, thresholds=[0.0, 0.1])
    assert frac[0] == 1.0


def test_pcc_zero_below_minimum_error():
    f = np.zeros((4, 3))
    g = np.full((4, 3), 1.0)
    thr, frac = evaluate.pcc_curve(f, g, thresholds=[0.0, 0.5, 1.0])
    assert frac[0] == 0.0 and frac[1] == 0.0


def test_pcc_monotone_on_random_input():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(30, 3))
    g = f + rng.normal(scale=0.1, size=(30, 3))
    _, frac = evaluate.pcc_curve(f, g)
    assert (np.diff(frac) >= 0).all()
    assert ((frac >= 0) & (frac <= 1)).all()


def test_pcc_rejects_unsorted_thresholds():
    with pytest.raises(ValueError):
        evaluate.pcc_curve(np.zeros((2, 3)), np.zeros((2, 3)), thresholds=[0.2, 0.1])


# -- Rand index -----------------------------------------------------------------

def brute_rand(a, b):
    n = len(a)
    agree = total = 0
    for i in range(n):
        for j in range(i + 1, n):
            total += 1
            agree += (a[i] == a[j]) == (b[i] == b[j])
    return agree / total


def test_rand_identical_is_one():
    labels = np.array([0, 1, 1, 2, 0])
    assert evaluate.rand_index(labels, labels) == 1.0


def test_rand_all_same_vs_halves():
    a = np.zeros(4, dtype=int)
    b = np.array([0, 0, 1, 1])
    assert evaluate.rand_index(a, b) == pytest.approx(brute_rand(a, b)) == pytest.approx(1 / 3)


def test_rand_label_permutation_invariant():
    rng = np.random.default_rng(4)
    a = rng.integers(0, 3, size=15)
    b = rng.integers(0, 3, size=15)
    relabeled = np.array([{0: 2, 1: 0, 2: 1}[v] for v in b])
    assert evaluate.rand_index(a, b) == evaluate.rand_index(a, relabeled)


def test_rand_matches_brute_force_up_to_12():
    rng = np.random.default_rng(5)
    for _ in range(30):
        n = int(rng.integers(2, 13))
        a = rng.integers(0, 4, size=n)
        b = rng.integers(0, 4, size=n)
        assert evaluate.rand_index(a, b) == pytest.approx(brute_rand(a, b), abs=1e-12)


# -- per-part IoU -----------------------------------------------------------------

def brute_per_part_iou(pred, gt):
    """Exhaustive best injective matching of gt parts onto predictions."""
    gt_ids = sorted(set(gt.tolist()))
    pred_ids = sorted(set(pred.tolist()))
    k = len(gt_ids)
    m = min(k, len(pred_ids))
    best = 0.0
    for rows in itertools.permutations(gt_ids, m):
        for cols in itertools.permutations(pred_ids, m):
            total = sum(evaluate.hard_iou(gt == gi, pred == pj)
                        for gi, pj in zip(rows, cols))
            best = max(best, total)
    return best / k


def test_iou_perfect_prediction():
    labels = np.array([0, 0, 1, 1, 2])
    assert evaluate.per_part_iou(labels, labels) == 1.0


def test_iou_merged_parts_quarter():
    gt = np.array([0] * 4 + [1] * 4)
    pred = np.zeros(8, dtype=int)
    assert evaluate.per_part_iou(pred, gt) == pytest.approx(0.25)


def test_iou_extra_spurious_parts_do_not_change_score():
    gt = np.array([0] * 5 + [1] * 5)
    pred = np.array([0] * 5 + [1] * 5)
    base = evaluate.per_part_iou(pred, gt)
    pred_extra = pred.copy()
    pred_extra[-1] = 7  # one stray extra segment
    with_extra = evaluate.per_part_iou(pred_extra, gt)
    # the two best matches persist; only the stolen point changes its IoU
    assert with_extra == pytest.approx(0.5 + 0.5 * 4 / 5)
    assert base == 1.0


def test_iou_matches_brute_force_up_to_12():
    rng = np.random.default_rng(6)
    for _ in range(40):
        n = int(rng.integers(3, 13))
        gt = rng.integers(0, 3, size=n)
        pred = rng.integers(0, 4, size=n)
        got = evaluate.per_part_iou(pred, gt)
        expect = brute_per_part_iou(pred, gt)
        assert got == pytest.approx(expect, abs=1e-12)
        assert 0.0 <= got <= 1.0


# -- sequential RANSAC ---------------------------------------------------------------

def rigid_flow(positions, rotation, translation):
    return positions @ rotation.T + translation - positions


def test_ransac_single_clean_motion():
    rng = np.random.default_rng(7)
    pos = rng.normal(size=(60, 3))
    r = rot_exp(np.array([0.2, -0.1, 0.4]))
    t = np.array([0.1, 0.2, -0.05])
    res = evaluate.seq_ransac(pos, rigid_flow(pos, r, t))
    assert res.n_segments == 1
    assert np.abs(res.motions[0].rotation - r).max() < 1e-3
    assert np.abs(res.motions[0].translation - t).max() < 1e-3


def test_ransac_two_parts_dominant_first():
    rng = np.random.default_rng(8)
    pos = rng.normal(size=(100, 3))
    gt = np.array([0] * 60 + [1] * 40)
    r0 = rot_exp(np.array([0.0, 0.0, 0.5]))
    r1 = rot_exp(np.array([0.7, 0.0, 0.0]))
    flow = np.where((gt == 0)[:, None], rigid_flow(pos, r0, np.zeros(3)),
                    rigid_flow(pos, r1, np.array([0.5, 0, 0])))
    res = evaluate.seq_ransac(pos, flow)
    # first extracted part is the dominant 60-point one
    assert (res.labels[:60] == 0).mean() > 0.95
    assert evaluate.rand_index(res.labels, gt) >= 0.99


def test_ransac_zero_flow_identity():
    rng = np.random.default_rng(9)
    pos = rng.normal(size=(40, 3))
    res = evaluate.seq_ransac(pos, np.zeros((40, 3)))
    assert res.n_segments == 1
    np.testing.assert_allclose(res.motions[0].rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(res.motions[0].translation, 0.0, atol=1e-9)


def test_ransac_deterministic():
    rng = np.random.default_rng(10)
    pos = rng.normal(size=(50, 3))
    flow = rng.normal(scale=0.2, size=(50, 3))
    a = evaluate.seq_ransac(pos, flow, evaluate.RansacConfig(seed=3))
    b = evaluate.seq_ransac(pos, flow, evaluate.RansacConfig(seed=3))
    np.testing.assert_array_equal(a.labels, b.labels)


def test_ransac_round_cap_on_noise():
    rng = np.random.default_rng(11)
    pos = rng.normal(size=(300, 3))
    flow = rng.normal(scale=2.0, size=(300, 3))  # no common rigid mode
    res = evaluate.seq_ransac(pos, flow, evaluate.RansacConfig(samples_per_round=32))
    assert res.rounds <= 10
    assert res.n_segments <= 10
    assert (res.labels >= 0).all()


def test_ransac_remainder_rule_stops_early():
    rng = np.random.default_rng(12)
    pos = rng.normal(size=(100, 3))
    # one giant rigid part (97%) plus 3 stray points with wild flow
    flow = np.zeros((100, 3))
    flow[:3] = rng.normal(scale=5.0, size=(3, 3))
    res = evaluate.seq_ransac(pos, flow)
    assert res.rounds == 1  # 3 remaining points < 5% of 100
    assert res.n_segments == 1
    assert (res.labels == 0).sum() >= 97


# -- report ---------------------------------------------------------------------------

def test_metrics_report_text(tmp_path):
    rep = evaluate.MetricsReport()
    rep.add_pair(epe_value=0.02, ri=0.9, iou=0.8)
    rep.add_pair(epe_value=0.04, ri=0.8, iou=0.6)
    text = rep.to_text("ours")
    assert "RI/IoU 85.0/70.0" in text
    rep.pcc_thresholds, rep.pcc_fractions = evaluate.pcc_curve(
        np.zeros((4, 3)), np.zeros((4, 3)))
    rep.write(tmp_path / "metrics.txt")
    rep.write_pcc(tmp_path / "pcc.txt")
    assert (tmp_path / "metrics.txt").exists()
    assert len((tmp_path / "pcc.txt").read_text().splitlines()) == 50
