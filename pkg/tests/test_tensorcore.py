import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpnplab import tensorcore as tc
from conftest import check_grads


def p64(arr, name="w"):
    return tc.parameter(np.asarray(arr, dtype=np.float64), name=name, dtype=np.float64)


# --- forward values and FLOPs conventions ------------------------------------

def test_matmul_forward_flops_4x3_3x2():
    with tc.Tape() as tape:
        tc.matmul(np.ones((4, 3)), np.ones((3, 2)))
    assert tape.flops_report().forward == 48


def test_softmax_equal_logits_uniform():
    out = tc.softmax(np.zeros((2, 5)))
    np.testing.assert_allclose(out.data, np.full((2, 5), 0.2), rtol=1e-6)
    np.testing.assert_allclose(out.data.sum(-1), 1.0, rtol=1e-6)


def test_gelu_zero_and_known_values(f64):
    out = tc.gelu(np.array([0.0, 1.0, -1.0]))
    # exact GELU: x * Phi(x); Phi(1) = 0.8413447460685429
    np.testing.assert_allclose(out.data, [0.0, 0.8413447460685429, -0.15865525393145707],
                               rtol=1e-12)


def test_sigmoid_one(f64):
    assert tc.sigmoid(np.array(1.0)).data == pytest.approx(0.7310585786300049, rel=1e-12)


def test_softmax_mask_gives_exact_zeros():
    mask = np.array([[True, False, True]])
    out = tc.softmax(np.array([[1.0, 50.0, 2.0]]), mask=mask)
    assert out.data[0, 1] == 0.0
    np.testing.assert_allclose(out.data.sum(), 1.0, rtol=1e-6)


def test_layer_norm_normalizes(f64):
    x = np.random.default_rng(0).normal(size=(3, 8)) * 5 + 2
    out = tc.layer_norm(x, np.ones(8), np.zeros(8)).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(-1), 1.0, rtol=1e-4)


def test_cross_entropy_uniform_logits(f64):
    loss = tc.cross_entropy(np.zeros((2, 3, 4)), np.zeros((2, 3), dtype=int))
    assert float(loss.data) == pytest.approx(math.log(4), rel=1e-12)


def test_cross_entropy_weighted_mean(f64):
    logits = np.array([[0.0, 0.0], [10.0, 0.0]])
    w = np.array([1.0, 0.0])
    loss = tc.cross_entropy(logits, np.array([0, 1]), w)
    assert float(loss.data) == pytest.approx(math.log(2), rel=1e-12)
    with pytest.raises(ValueError):
        tc.cross_entropy(logits, np.array([0, 1]), np.zeros(2))


def test_embedding_lookup():
    table = np.arange(12.0).reshape(4, 3)
    out = tc.embedding(table, np.array([[3, 0]]))
    np.testing.assert_array_equal(out.data, [[[9, 10, 11], [0, 1, 2]]])
    with pytest.raises(IndexError):
        tc.embedding(table, np.array([4]))


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(tc.ShapeError, match=r"matmul.*\(4, 3\).*\(2, 2\)"):
        tc.matmul(np.ones((4, 3)), np.ones((2, 2)))
    with pytest.raises(tc.ShapeError, match="concat"):
        tc.concat([np.ones((2, 3)), np.ones((3, 2))], axis=0)
    with pytest.raises(tc.ShapeError, match="add"):
        tc.add(np.ones((2, 3)), np.ones((4,)))


def test_checked_mode_rejects_non_finite():
    w = tc.parameter(np.array([1.0, np.nan]))
    with tc.Tape(checked=True):
        with pytest.raises(tc.NonFiniteError):
            tc.scale(w, 2.0)


def test_region_tags_validated():
    with pytest.raises(ValueError):
        with tc.region("nonsense"):
            pass
    with tc.region("block[3]"):
        assert tc.current_region() == "block[3]"


# --- backward ------------------------------------------------------------------

def test_square_grad(f64):
    w = p64(3.0)
    with tc.Tape() as tape:
        tape.backward(tc.mul(w, w))
    assert float(w.grad) == 6.0


def test_single_matmul_splits_evenly_between_dy_and_dw(f64):
    m, k, n = 4, 3, 2
    a, b = p64(np.ones((m, k)), "a"), p64(np.ones((k, n)), "b")
    with tc.Tape() as tape:
        y = tc.matmul(a, b)
        loss = tc.sum(y)
        before = tape.flops_report()
        tape.backward(loss)
    delta = tape.flops_report() - before
    mm = 2 * m * k * n
    # the sum's own backward is 1 FLOP per element into y (dy, not a parameter)
    assert delta.backward_dw == mm
    assert delta.backward_dy == mm + m * n


def test_left_weight_counts_as_dw(f64):
    w = p64(np.ones((2, 3)))
    x = tc.detach_boundary(tc.constant(np.ones((3, 1))))
    with tc.Tape() as tape:
        tape.backward(tc.sum(tc.matmul(w, x)))
    rep = tape.flops_report()
    assert rep.backward_dw == 2 * 2 * 3 * 1
    assert x.grad is None


def test_backward_requires_scalar_and_single_use(f64):
    w = p64(np.ones(3))
    with tc.Tape() as tape:
        y = tc.scale(w, 2.0)
        with pytest.raises(tc.TapeError):
            tape.backward(y)
        loss = tc.sum(y)
        tape.backward(loss)
        with pytest.raises(tc.TapeError):
            tape.backward(loss)


def test_frozen_tensor_never_gets_grad(f64):
    w, f = p64(np.ones(3), "w"), p64(np.ones(3), "f")
    f.requires_grad = False
    with tc.Tape() as tape:
        tape.backward(tc.sum(tc.mul(w, f)))
    assert f.grad is None
    np.testing.assert_array_equal(w.grad, np.ones(3))


def test_detach_then_add(f64):
    a, b = p64(np.ones(4), "a"), p64(np.ones(4), "b")
    with tc.Tape() as tape:
        ah = tc.scale(a, 3.0)
        y = tc.add(tc.detach_boundary(ah), b)
        tape.backward(tc.sum(y))
    np.testing.assert_array_equal(b.grad, np.ones(4))
    assert a.grad is None


def test_detach_leaves_producer_region_counters_untouched(f64):
    w = p64(np.ones((3, 3)))
    x = tc.constant(np.ones((2, 3)))
    with tc.Tape() as tape:
        with tc.region("block[1]"):
            h = tc.matmul(x, w)
        with tc.region("head"):
            v = p64(np.ones((3, 1)), "v")
            loss = tc.sum(tc.matmul(tc.detach_boundary(h), v))
        tape.backward(loss)
    rep = tape.flops_report()
    assert rep.region("block[1]").backward == 0
    assert w.grad is None and rep.region("head").backward_dw > 0


def test_flops_report_snapshot_is_immutable():
    w = tc.parameter(np.ones((2, 2)))
    with tc.Tape() as tape:
        snap = tape.flops_report()
        assert snap.forward == snap.backward == 0
        tc.matmul(w, w)
        assert snap.forward == 0
        after_fwd = tape.flops_report()
    assert after_fwd.forward == 16 and after_fwd.backward == 0
    with pytest.raises(Exception):
        snap.by_region["x"] = None


def test_counter_conservation_and_blocks():
    w = tc.parameter(np.ones((2, 2)))
    with tc.Tape() as tape:
        with tc.region("block[2]"):
            y = tc.matmul(np.ones((1, 2)), w)
        with tc.region("head"):
            loss = tc.sum(tc.gelu(y))
        tape.backward(loss)
    rep = tape.flops_report()
    assert rep.backward == sum(r.backward_dy + r.backward_dw for r in rep.by_region.values())
    assert set(rep.blocks()) == {2}


def test_gradient_sink_computes_boundary_grad_only(f64):
    w1, w2 = p64(np.eye(3) * 2, "w1"), p64(np.ones((3, 1)), "w2")
    with tc.Tape() as tape:
        h = tc.matmul(np.ones((1, 3)), w1)
        s = tc.detach_boundary(h, keep_grad=True)
        tape.backward(tc.sum(tc.matmul(s, w2)))
    np.testing.assert_array_equal(s.grad, np.ones((1, 3)))
    assert w1.grad is None


# --- gradient oracle: central differences ---------------------------------------

def _rand(rng, *shape):
    return rng.normal(size=shape)


OPS = {
    "matmul": lambda ps, rng: tc.sum(tc.matmul(ps[0], ps[1])),
    "matmul_tb": lambda ps, rng: tc.sum(tc.gelu(tc.matmul(ps[0], ps[2], transpose_b=True))),
    "add_broadcast": lambda ps, rng: tc.sum(tc.mul(tc.add(ps[0], ps[3]), ps[0])),
    "sub_mul": lambda ps, rng: tc.sum(tc.mul(tc.sub(ps[0], 0.5), tc.sub(ps[0], ps[0] * 0.3))),
    "scale": lambda ps, rng: tc.sum(tc.mul(tc.scale(ps[0], -1.7), ps[0])),
    "concat": lambda ps, rng: tc.sum(tc.gelu(tc.concat([ps[0], ps[0] * 2.0], axis=0))),
    "gelu": lambda ps, rng: tc.sum(tc.mul(tc.gelu(ps[0]), ps[0])),
    "sigmoid": lambda ps, rng: tc.sum(tc.mul(tc.sigmoid(ps[0]), ps[0])),
    "softmax": lambda ps, rng: tc.sum(tc.mul(tc.softmax(ps[0]), ps[0])),
    "softmax_masked": lambda ps, rng: tc.sum(tc.mul(
        tc.softmax(ps[0], mask=np.array([True, False, True, True])), ps[0])),
    "layer_norm": lambda ps, rng: tc.sum(tc.mul(tc.layer_norm(ps[0], ps[4], ps[5]), ps[0])),
    "embedding": lambda ps, rng: tc.sum(tc.gelu(tc.embedding(ps[1], np.array([[0, 2], [2, 3]])))),
    "cross_entropy": lambda ps, rng: tc.cross_entropy(tc.matmul(ps[0], ps[1]),
                                                      np.array([0, 1, 2]),
                                                      np.array([1.0, 0.0, 2.0])),
    "reshape_transpose": lambda ps, rng: tc.sum(tc.gelu(tc.transpose(
        tc.reshape(ps[0], (2, 3, 2)), (1, 0, 2)))),
    "getitem_mean": lambda ps, rng: tc.mean(tc.gelu(tc.getitem(ps[0], (slice(1, 3), 0)))),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_gradients_match_central_differences(op, f64):
    rng = np.random.default_rng(hash(op) % 2**32)
    ps = [p64(_rand(rng, 3, 4), "x"), p64(_rand(rng, 4, 3), "y"), p64(_rand(rng, 5, 4), "z"),
          p64(_rand(rng, 4), "r"), p64(1 + 0.1 * _rand(rng, 4), "g"), p64(_rand(rng, 4), "b")]
    fn = lambda: OPS[op](ps, rng)
    with tc.Tape() as tape:
        tape.backward(fn())
    used = [p for p in ps if p.grad is not None]
    for p in ps:
        p.grad = None
    assert used
    assert check_grads(fn, used, coords_per_param=6, seed=1) <= 1e-5


# --- properties ------------------------------------------------------------------

small = st.integers(min_value=1, max_value=5)


@settings(max_examples=40, deadline=None)
@given(small, small, small)
def test_matmul_flops_convention(m, k, n):
    with tc.Tape() as tape:
        tc.matmul(np.ones((m, k)), np.ones((k, n)))
    assert tape.flops_report().forward == 2 * m * k * n


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1), st.booleans())
def test_stop_boundary_never_increases_counters(seed, detach):
    rng = np.random.default_rng(seed)
    w1 = tc.parameter(rng.normal(size=(4, 4)))
    w2 = tc.parameter(rng.normal(size=(4, 2)))
    x = rng.normal(size=(3, 4))

    def run(stop):
        with tc.Tape() as tape:
            with tc.region("block[1]"):
                h = tc.gelu(tc.matmul(x, w1))
            if stop:
                h = tc.detach_boundary(h, keep_grad=detach)
            with tc.region("block[2]"):
                loss = tc.sum(tc.matmul(h, w2))
            tape.backward(loss)
        tc.zero_grads([w1, w2])
        return tape.flops_report()

    full, cut = run(False), run(True)
    for tag in set(full.by_region) | set(cut.by_region):
        assert cut.region(tag).backward_dy <= full.region(tag).backward_dy
        assert cut.region(tag).backward_dw <= full.region(tag).backward_dw


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_determinism_bit_identical(seed):
    def run():
        rng = np.random.default_rng(seed)
        w = tc.parameter(rng.normal(size=(3, 3)))
        with tc.Tape() as tape:
            loss = tc.sum(tc.softmax(tc.matmul(rng.normal(size=(2, 3)), w)) * 1.5)
            tape.backward(loss)
        return w.grad.tobytes(), loss.data.tobytes(), tape.flops_report().as_dict()

    assert run() == run()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(xs):
    out = tc.softmax(np.array([xs]))
    assert abs(float(out.data.sum()) - 1.0) < 1e-5
    assert np.all(out.data >= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4))
def test_grad_shape_matches_data(r, c):
    w = tc.parameter(np.ones((r, c)))
    with tc.Tape() as tape:
        tape.backward(tc.sum(tc.gelu(w)))
    assert w.grad.shape == w.data.shape
