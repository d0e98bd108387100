import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_conv2d, naive_conv2d_input_adjoint
from skelae.autodiff import (
    Adam,
    AdamState,
    IndexMap,
    Node,
    NonFiniteError,
    RunningStats,
    ShapeError,
    adam_step,
    backward,
    batchnorm2d,
    conv2d,
    deconv2d,
    dense,
    grl,
    leaf,
    maxpool2d,
    maxunpool2d,
    mul,
    relu,
    sigmoid,
    square,
    sum_all,
)
from skelae.autodiff import checkpoint
from skelae.autodiff.gradcheck import check_gradients


def weighted_sum(node, w):
    return sum_all(mul(node, Node(w)))


# -- conv2d -----------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 4, 5))
    out = conv2d(leaf(x), leaf(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.value, x)


def test_conv_row_average():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4)
    k = np.full((1, 1, 1, 3), 1 / 3)
    expected = naive_conv2d(x, k)
    assert np.allclose(expected.ravel(), [2.0, 3.0])
    assert np.allclose(conv2d(leaf(x), leaf(k)).value, expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize(
    "shape,kshape,stride,pad",
    [
        ((2, 3, 8, 8), (4, 3, 3, 3), (1, 1), (1, 1)),
        ((2, 3, 8, 8), (2, 3, 1, 3), (1, 1), (0, 1)),
        ((1, 2, 7, 6), (3, 2, 3, 2), (2, 1), (0, 0)),
        ((2, 1, 5, 8), (1, 1, 2, 4), (1, 2), (1, 2)),
    ],
)
def test_conv_matches_naive_loop(shape, kshape, stride, pad):
    rng = np.random.default_rng(1)
    # dyadic values: every product and partial sum is exact, so any summation order agrees bitwise
    x = rng.integers(-64, 64, size=shape) / 16.0
    k = rng.integers(-64, 64, size=kshape) / 16.0
    assert np.array_equal(conv2d(leaf(x), leaf(k), stride, pad).value, naive_conv2d(x, k, stride, pad))
    # general floats agree to rounding
    x, k = rng.normal(size=shape), rng.normal(size=kshape)
    np.testing.assert_allclose(conv2d(leaf(x), leaf(k), stride, pad).value, naive_conv2d(x, k, stride, pad),
                               rtol=1e-12, atol=1e-13)


def test_conv_errors():
    with pytest.raises(ShapeError) as e:
        conv2d(leaf(np.zeros((1, 2, 4, 4))), leaf(np.zeros((1, 3, 1, 1))))
    assert e.value.dim == "C_in"
    with pytest.raises(ValueError):
        conv2d(leaf(np.zeros((1, 1, 4, 4))), leaf(np.zeros((1, 1, 1, 1))), stride=0)
    with pytest.raises(ShapeError) as e:
        conv2d(leaf(np.zeros((1, 1, 2, 4))), leaf(np.zeros((1, 1, 3, 1))))
    assert e.value.dim == "H"


@given(h=st.integers(1, 9), w=st.integers(1, 9), kh=st.integers(1, 4), kw=st.integers(1, 4),
       sh=st.integers(1, 3), sw=st.integers(1, 3), ph=st.integers(0, 2), pw=st.integers(0, 2))
@settings(max_examples=60, deadline=None)
def test_conv_extent_formula(h, w, kh, kw, sh, sw, ph, pw):
    if h + 2 * ph < kh or w + 2 * pw < kw:
        with pytest.raises(ShapeError):
            conv2d(leaf(np.zeros((1, 1, h, w))), leaf(np.zeros((1, 1, kh, kw))), (sh, sw), (ph, pw))
        return
    out = conv2d(leaf(np.ones((1, 1, h, w))), leaf(np.ones((1, 1, kh, kw))), (sh, sw), (ph, pw))
    assert out.shape == (1, 1, (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1)


def test_conv_gradients_finite_difference():
    rng = np.random.default_rng(2)
    x = leaf(rng.normal(size=(2, 3, 5, 6)))
    k = leaf(rng.normal(size=(4, 3, 3, 3)))
    w = rng.normal(size=(2, 4, 3, 6))
    errs = check_gradients(lambda: weighted_sum(conv2d(x, k, 1, (0, 1)), w), [x, k])
    assert max(errs) <= 1e-6


# -- deconv2d -----------------------------------------------------------------


def test_deconv_identity():
    x = np.random.default_rng(3).normal(size=(2, 1, 3, 4))
    assert np.array_equal(deconv2d(leaf(x), leaf(np.ones((1, 1, 1, 1)))).value, x)


@pytest.mark.parametrize("stride,pad", [((1, 1), (0, 1)), ((2, 1), (1, 0)), ((1, 2), (0, 0))])
def test_deconv_is_conv_input_adjoint(stride, pad):
    rng = np.random.default_rng(4)
    x = leaf(rng.normal(size=(2, 3, 7, 8)))
    k = leaf(rng.normal(size=(5, 3, 3, 3)))
    y = conv2d(x, k, stride, pad)
    g = rng.normal(size=y.shape)
    backward(weighted_sum(y, g))
    # deconv output has extents (H'-1)*s - 2p + k, which may drop trailing rows conv never reads
    dec = deconv2d(leaf(g), k, stride, pad).value
    h, w = dec.shape[2:]
    assert np.array_equal(dec, x.grad[:, :, :h, :w])
    np.testing.assert_allclose(dec, naive_conv2d_input_adjoint(g, k.value, dec.shape[:1] + (3, h, w), stride, pad),
                               rtol=1e-12, atol=1e-12)


def test_deconv_gradients_finite_difference():
    rng = np.random.default_rng(5)
    x = leaf(rng.normal(size=(2, 4, 3, 5)))
    k = leaf(rng.normal(size=(4, 2, 1, 3)))
    w = rng.normal(size=(2, 2, 3, 5))
    errs = check_gradients(lambda: weighted_sum(deconv2d(x, k, 1, (0, 1)), w), [x, k])
    assert max(errs) <= 1e-6


# -- pooling --------------------------------------------------------------------


def test_maxpool_constant_ties_take_lowest_index():
    out, idx = maxpool2d(leaf(np.full((1, 1, 4, 4), 7.0)), (2, 2))
    assert np.all(out.value == 7.0)
    assert idx.flat[0, 0].tolist() == [[0, 2], [8, 10]]


def test_maxpool_unique_max():
    out, idx = maxpool2d(leaf(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), (2, 2))
    assert out.value.item() == 4.0
    assert idx.flat.item() == 3


def test_maxpool_errors_and_padding():
    with pytest.raises(ShapeError):
        maxpool2d(leaf(np.zeros((1, 1, 2, 2))), (3, 1))
    with pytest.raises(ShapeError) as e:
        maxpool2d(leaf(np.zeros((1, 1, 4, 5))), (2, 2))
    assert e.value.dim == "W"
    x = -np.arange(1.0, 11.0).reshape(1, 1, 2, 5)
    out, idx = maxpool2d(leaf(x), (2, 2), pad_to_fit=True)
    assert out.shape == (1, 1, 1, 3)
    assert out.value[0, 0, 0, 2] == 0.0  # zero padding wins over negatives


def test_maxpool_gradient_routes_to_argmax():
    rng = np.random.default_rng(6)
    x = leaf(rng.permutation(24).reshape(1, 2, 3, 4).astype(float))
    out, idx = maxpool2d(x, (1, 2))
    backward(sum_all(out))
    expected = np.zeros(24).reshape(1, 2, 12)
    np.put_along_axis(expected, idx.flat.reshape(1, 2, -1), 1.0, axis=-1)
    assert np.array_equal(x.grad, expected.reshape(1, 2, 3, 4))
    w = rng.normal(size=out.shape)
    assert max(check_gradients(lambda: weighted_sum(maxpool2d(x, (1, 2))[0], w), [x])) <= 1e-6


def test_unpool_single_scatter():
    idx = IndexMap(flat=np.array([[[[3]]]]), in_shape=(1, 1, 1, 4))
    out = maxunpool2d(leaf(np.array([[[[5.0]]]])), idx)
    assert out.value.ravel().tolist() == [0.0, 0.0, 0.0, 5.0]


def test_unpool_round_trip_and_range_check():
    rng = np.random.default_rng(7)
    x = leaf(rng.normal(size=(2, 3, 4, 6)))
    pooled, idx = maxpool2d(x, (2, 3))
    y = leaf(rng.normal(size=pooled.shape))
    again, _ = maxpool2d(maxunpool2d(pooled, idx), (2, 3))
    assert np.array_equal(again.value, pooled.value)
    # any y: pooling the unpooled map returns y where y is positive (zeros elsewhere compete)
    y_pos = leaf(np.abs(y.value) + 0.1)
    back_pooled, _ = maxpool2d(maxunpool2d(y_pos, idx), (2, 3))
    assert np.array_equal(back_pooled.value, y_pos.value)
    bad = IndexMap(flat=np.full(pooled.shape, 99), in_shape=idx.in_shape)
    with pytest.raises(IndexError):
        maxunpool2d(pooled, bad)
    w = rng.normal(size=x.shape)
    assert max(check_gradients(lambda: weighted_sum(maxunpool2d(y, idx), w), [y])) <= 1e-6


# -- batch norm --------------------------------------------------------------------


def test_batchnorm_normalizes():
    rng = np.random.default_rng(8)
    # eps shrinks the output variance to var / (var + eps); scale 5 keeps that within 1e-6 of 1
    x = rng.normal(loc=3.0, scale=5.0, size=(4, 3, 5, 6))
    out = batchnorm2d(leaf(x), leaf(np.ones(3)), leaf(np.zeros(3)), RunningStats.fresh(3)).value
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_batchnorm_constant_batch_gives_beta():
    beta = np.array([0.25, -1.5])
    out = batchnorm2d(leaf(np.full((2, 2, 4, 4), 3.0)), leaf(np.array([2.0, 5.0])), leaf(beta),
                      RunningStats.fresh(2)).value
    assert np.array_equal(out, np.broadcast_to(beta[None, :, None, None], out.shape))


def test_batchnorm_running_stats_and_eval():
    rng = np.random.default_rng(9)
    x = rng.normal(loc=2.0, size=(3, 2, 4, 4))
    stats = RunningStats.fresh(2)
    batchnorm2d(leaf(x), leaf(np.ones(2)), leaf(np.zeros(2)), stats)
    n = 3 * 16
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
    out = batchnorm2d(leaf(x), leaf(np.ones(2)), leaf(np.zeros(2)), stats, mode="eval").value
    expected = (x - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, expected)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients(mode):
    rng = np.random.default_rng(10)
    x = leaf(rng.normal(size=(3, 2, 3, 4)))
    g, b = leaf(rng.normal(size=2)), leaf(rng.normal(size=2))
    stats = RunningStats(rng.normal(size=2), rng.uniform(0.5, 2, size=2))
    w = rng.normal(size=x.shape)

    def f():
        frozen = RunningStats(stats.mean, stats.var)
        return weighted_sum(batchnorm2d(x, g, b, frozen, mode=mode), w)

    assert max(check_gradients(f, [x, g, b])) <= 1e-5


# -- dense / activations --------------------------------------------------------------


def test_dense_relu_sigmoid_values():
    x = np.random.default_rng(11).normal(size=(3, 4))
    assert np.array_equal(dense(leaf(x), leaf(np.eye(4)), leaf(np.zeros(4))).value, x)
    assert relu(leaf(np.array([-1.0, 2.0]))).value.tolist() == [0.0, 2.0]
    assert sigmoid(leaf(np.array([0.0]))).value.item() == 0.5
    big = sigmoid(leaf(np.array([-800.0, 800.0]))).value
    assert np.all(np.isfinite(big))


def test_dense_shape_error():
    with pytest.raises(ShapeError) as e:
        dense(leaf(np.zeros((2, 3))), leaf(np.zeros((4, 5))))
    assert e.value.dim == "F_in"


def test_dense_relu_sigmoid_gradients():
    rng = np.random.default_rng(12)
    x, W, b = leaf(rng.normal(size=(5, 4))), leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=3))
    w = rng.normal(size=(5, 3))
    assert max(check_gradients(lambda: weighted_sum(dense(x, W, b), w), [x, W, b])) <= 1e-6
    # keep relu inputs away from the kink
    v = rng.normal(size=(5, 3))
    v[np.abs(v) < 0.1] += 0.3
    r = leaf(v)
    assert max(check_gradients(lambda: weighted_sum(relu(r), w), [r])) <= 1e-6
    assert max(check_gradients(lambda: weighted_sum(sigmoid(r), w), [r])) <= 1e-6


# -- gradient reversal ------------------------------------------------------------------


def test_grl_forward_is_identity():
    x = np.random.default_rng(13).normal(size=(4, 5))
    assert np.array_equal(grl(leaf(x), 0.7).value, x)
    with pytest.raises(ValueError):
        grl(leaf(x), 0.0)


def test_grl_flips_scalar_gradient():
    x = leaf(np.array(2.0))
    backward(grl(x, 1.0))
    assert x.grad.item() == -1.0


def test_grl_scaled_chain():
    x = leaf(np.array(3.0))
    backward(square(grl(x, 2.5)) * 0.5)
    assert x.grad.item() == pytest.approx(-7.5)
    # same chain without reversal, checked by finite differences, is +3
    y = leaf(np.array(3.0))
    assert check_gradients(lambda: square(y) * 0.5, [y])[0] <= 1e-8
    backward(square(y) * 0.5)
    assert x.grad.item() == pytest.approx(-2.5 * y.grad.item())


# -- backward ----------------------------------------------------------------------------


def test_backward_square_and_fanout():
    x = leaf(np.array(3.0))
    backward(square(x))
    assert x.grad.item() == 6.0
    x = leaf(np.array(1.0))
    backward(x + x)
    assert x.grad.item() == 2.0


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        backward(leaf(np.ones(3)) * 2.0)


def test_shared_subexpression_equals_expanded_tree():
    rng = np.random.default_rng(14)
    a0, b0 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))

    a, b = leaf(a0), leaf(b0)
    shared = mul(a, b)
    backward(sum_all(mul(shared, shared) + shared))
    ga_dag, gb_dag = a.grad, b.grad

    a, b = leaf(a0), leaf(b0)
    backward(sum_all(mul(mul(a, b), mul(a, b)) + mul(a, b)))
    np.testing.assert_allclose(ga_dag, a.grad, rtol=1e-14)
    np.testing.assert_allclose(gb_dag, b.grad, rtol=1e-14)


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        leaf(np.array([1e308])) * 10.0


# -- Adam ------------------------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    state = AdamState()
    p = {"w": np.array([1.0, -2.0])}
    new = adam_step(p, {"w": np.zeros(2)}, state)
    assert np.array_equal(new["w"], p["w"])
    assert np.array_equal(state.m["w"], np.zeros(2)) and np.array_equal(state.v["w"], np.zeros(2))


def test_adam_first_step_size():
    new = adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamState(lr=0.001))
    # bias-corrected m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert new["w"].item() == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_minimizes_quadratic():
    w = leaf(np.array(1.0))
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        backward(square(w))
        opt.step()
    assert abs(w.value.item()) < 0.05


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_adam_skips_missing_gradients():
    state = AdamState()
    p = {"a": np.ones(2), "b": np.ones(2)}
    new = adam_step(p, {"a": np.ones(2)}, state)
    assert new["b"] is p["b"] and "b" not in state.m


# -- checkpoint ---------------------------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(15)
    state = AdamState(lr=3e-4)
    params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4).astype(np.float32)}
    adam_step({k: v.astype(float) for k, v in params.items()}, {"a": rng.normal(size=(2, 3))}, state)
    groups, meta = checkpoint.adam_to_record(state)
    groups["params"] = params
    path = tmp_path / "c.ckpt"
    checkpoint.save(path, groups, {"adam": meta, "step": 7})
    loaded, lmeta = checkpoint.load(path)
    assert np.array_equal(loaded["params"]["a"], params["a"])
    assert np.array_equal(loaded["params"]["b"].astype(np.float32), params["b"])
    restored = checkpoint.adam_from_record(loaded, lmeta["adam"])
    assert restored.t == state.t and restored.lr == state.lr and np.array_equal(restored.m["a"], state.m["a"])
    again = checkpoint.dumps(loaded, lmeta)
    assert again == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOTACKPT" + b"\0" * 20)
