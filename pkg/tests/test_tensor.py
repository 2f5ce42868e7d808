import math

import numpy as np
import pytest

from partflow import tensor as T


def t64(x, grad=True):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- elementwise -------------------------------------------------------------

def test_relu_sign_cases():
    out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_sigmoid_symmetry():
    assert T.sigmoid(T.Tensor(0.0)).item() == pytest.approx(0.5)


def test_add_arithmetic():
    out = T.elementwise("add", T.Tensor([1.0, 2.0]), T.Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, [4.0, 6.0])


def test_elementwise_shape_mismatch_reports_both_shapes():
    with pytest.raises(T.ShapeError) as exc:
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(a))
    np.testing.assert_allclose(out.data, a.astype(np.float32), rtol=1e-6)


def test_matmul_hand_product():
    out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_inner_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))


def test_matmul_gradient_finite_differences():
    rng = np.random.default_rng(1)
    params = {
        "a": t64(rng.normal(size=(3, 4))),
        "b": t64(rng.normal(size=(4, 2))),
    }
    T.gradcheck(lambda p: T.reduce_sum(T.matmul(p["a"], p["b"])), params, tol=1e-4)


# -- reductions --------------------------------------------------------------

def test_reduce_max_columns():
    out = T.reduce("max", T.Tensor([[1.0, 5.0], [4.0, 2.0]]), axis=0)
    assert np.array_equal(out.data, [4.0, 5.0])


def test_reduce_mean():
    assert T.reduce("mean", T.Tensor([2.0, 4.0]), axis=0).item() == pytest.approx(3.0)


def test_max_gradient_routes_to_argmax():
    x = t64([[1.0, 5.0], [4.0, 2.0]])
    loss = T.reduce_sum(T.reduce_max(x, axis=0))
    T.backward(loss)
    assert np.array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])


def test_max_tie_breaks_to_lowest_index():
    x = t64([3.0, 3.0, 1.0])
    T.backward(T.reduce_max(x, axis=0))
    assert np.array_equal(x.grad, [1.0, 0.0, 0.0])


def test_max_gradient_finite_differences_away_from_ties():
    rng = np.random.default_rng(2)
    x = t64(rng.permutation(12).reshape(3, 4) + rng.uniform(0.0, 0.3, size=(3, 4)))
    T.gradcheck(lambda p: T.reduce_sum(T.reduce_max(p["x"], axis=1)), {"x": x}, tol=1e-4)


def test_reduce_empty_axis_rejected():
    with pytest.raises(T.ShapeError):
        T.reduce_sum(T.Tensor(np.zeros((0, 3))), axis=0)


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform_row():
    out = T.softmax_rows(T.Tensor([[2.0, 2.0, 2.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-7)


def test_softmax_hand_value():
    out = T.softmax_rows(T.Tensor([[0.0, math.log(3.0)]], dtype=np.float64))
    np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-9)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.normal(scale=rng.uniform(0.1, 50.0), size=(5, 7))
        out = T.softmax_rows(T.Tensor(x))
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5), atol=1e-6)


def test_softmax_rejects_nan():
    with pytest.raises(ValueError):
        T.softmax_rows(T.Tensor([[np.nan, 1.0]]))


# -- losses ------------------------------------------------------------------

def test_squared_l2_identical_inputs():
    f = T.Tensor(np.arange(6.0).reshape(2, 3))
    assert T.losses("squared-l2", f, f).item() == 0.0


def test_bce_confident_correct():
    p = T.Tensor([1.0 - T.LOG_EPS], dtype=np.float64)
    assert T.losses("binary-cross-entropy", p, T.Tensor([1.0])).item() == pytest.approx(0.0, abs=1e-6)


def test_bce_half():
    out = T.losses("binary-cross-entropy", T.Tensor([0.5], dtype=np.float64), T.Tensor([1.0]))
    assert out.item() == pytest.approx(math.log(2.0), abs=1e-6)


def test_softmax_ce_index_out_of_range():
    with pytest.raises(IndexError):
        T.loss_softmax_ce(T.Tensor(np.zeros((2, 3))), [0, 3])


def test_softmax_ce_uniform_value():
    n = 7
    out = T.loss_softmax_ce(T.Tensor(np.zeros((4, n)), dtype=np.float64), [0, 1, 2, 3], reduction="sum")
    assert out.item() == pytest.approx(4 * math.log(n), abs=1e-9)


# -- backward ----------------------------------------------------------------

def test_square_derivative():
    x = t64(3.0)
    T.backward(T.mul(x, x))
    assert x.grad == pytest.approx(6.0)


def test_backward_accumulates_without_reset():
    x = t64(2.0)
    T.backward(T.mul(x, x))
    T.backward(T.mul(x, x))
    assert x.grad == pytest.approx(8.0)


def test_backward_constant_graph_empty_map():
    out = T.mul(T.Tensor(2.0), T.Tensor(3.0))
    assert T.backward(out) == {}


def test_backward_non_scalar_rejected():
    x = t64([1.0, 2.0])
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(x, x))


def test_composite_gradcheck_all_ops():
    rng = np.random.default_rng(4)

    def fn(p):
        h = T.relu(T.matmul(p["x"], p["w"]))
        h = T.add(h, p["b"])
        h = T.sigmoid(h)
        row = T.softmax_rows(T.reshape(h, (2, 6)))
        pooled = T.reduce_max(T.exp(T.mul(h, 0.3)), axis=0)
        both = T.concat([T.reduce_sum(row, axis=1), pooled], axis=0)
        picked = T.gather(both, [0, 3, 1], axis=0)
        return T.add(T.reduce_mean(T.log(T.add(picked, 2.0))),
                     T.reduce_sum(T.mul(both, both)))

    params = {
        "x": t64(rng.normal(size=(4, 5)) + 0.1),
        "w": t64(rng.normal(size=(5, 3))),
        "b": t64(rng.normal(size=(3,))),
    }
    worst = T.gradcheck(fn, params, tol=1e-3)
    assert worst < 1e-3


def test_loss_gradchecks():
    rng = np.random.default_rng(5)
    pred = t64(rng.uniform(0.1, 0.9, size=(3, 4)))
    target = np.asarray(rng.uniform(0, 1, size=(3, 4)) > 0.5, dtype=np.float64)
    T.gradcheck(lambda p: T.loss_bce(p["p"], T.Tensor(target, dtype=np.float64)), {"p": pred}, tol=1e-3)

    logits = t64(rng.normal(size=(4, 6)))
    idx = rng.integers(0, 6, size=4)
    T.gradcheck(lambda p: T.loss_softmax_ce(p["l"], idx), {"l": logits}, tol=1e-3)

    a = t64(rng.normal(size=(5, 3)))
    gt = rng.normal(size=(5, 3))
    T.gradcheck(lambda p: T.loss_squared_l2(p["a"], T.Tensor(gt, dtype=np.float64)), {"a": a}, tol=1e-3)


def test_forward_deterministic():
    x = np.linspace(-1, 1, 12).reshape(3, 4)
    a = T.softmax_rows(T.Tensor(x)).data
    b = T.softmax_rows(T.Tensor(x)).data
    assert np.array_equal(a, b)


# -- Adam --------------------------------------------------------------------

def reference_adam(param, grad, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m, v


def test_adam_zero_gradient_no_change():
    p = T.Tensor(np.ones(4), requires_grad=True)
    before = p.data.copy()
    T.adam_step({"p": p}, {"p": np.zeros(4)}, T.AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_matches_reference():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(3, 2)).astype(np.float32)
    g = rng.normal(size=(3, 2)).astype(np.float32)
    p = T.Tensor(w.copy(), requires_grad=True)
    state = T.AdamState()
    T.adam_step({"w": p}, {"w": g}, state, lr=1e-2)
    expect, _, _ = reference_adam(w.astype(np.float64), g.astype(np.float64),
                                  np.zeros_like(w, dtype=np.float64),
                                  np.zeros_like(w, dtype=np.float64), 1, 1e-2)
    np.testing.assert_allclose(p.data, expect, atol=1e-6)
    # first-step direction is -sign(g) up to the eps correction
    assert np.all(np.sign(p.data - w) == -np.sign(g))


def test_adam_three_steps_match_reference():
    rng = np.random.default_rng(7)
    w0 = rng.normal(size=5)
    p = T.Tensor(w0.astype(np.float64), requires_grad=True)
    state = T.AdamState()
    ref = w0.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 4):
        g = rng.normal(size=5)
        T.adam_step({"w": p}, {"w": g}, state, lr=3e-3)
        ref, m, v = reference_adam(ref, g, m, v, t, 3e-3)
    np.testing.assert_allclose(p.data, ref, atol=1e-12)


def test_adam_deterministic_repeat():
    def run():
        p = T.Tensor(np.full(3, 0.5, dtype=np.float32), requires_grad=True)
        st = T.AdamState()
        for _ in range(2):
            T.adam_step({"p": p}, {"p": np.array([0.1, -0.2, 0.3], dtype=np.float32)}, st, lr=1e-3)
        return p.data.tobytes()

    assert run() == run()


def test_adam_nan_gradient_rejected(caplog):
    p = T.Tensor(np.ones(2), requires_grad=True)
    state = T.AdamState()
    with caplog.at_level("WARNING"):
        T.adam_step({"p": p}, {"p": np.array([np.nan, 1.0])}, state, lr=0.1)
    np.testing.assert_array_equal(p.data, np.ones(2))
    assert state.step == 0
    assert any("non-finite" in r.message for r in caplog.records)


# -- checkpoint --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    entries = {
        "layer0/w": rng.normal(size=(4, 3)).astype(np.float32),
        "layer0/b": rng.normal(size=(3,)).astype(np.float32),
        "scalar": np.float32(2.5),
    }
    path = tmp_path / "model.ptfl"
    T.save_checkpoint(path, entries)
    back = T.load_checkpoint(path)
    assert set(back) == set(entries)
    for k in entries:
        np.testing.assert_array_equal(back[k], np.asarray(entries[k], dtype=np.float32))
    with open(path, "rb") as fh:
        assert fh.read(4) == b"PTFL"


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        T.load_checkpoint(path)
