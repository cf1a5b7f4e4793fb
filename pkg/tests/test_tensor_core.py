import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xvol import config
from xvol.errors import ShapeError
from xvol import tensor as T
from xvol.tensor import (
    BatchNormStats,
    Tensor,
    backward,
    batchnorm3d,
    clamp,
    concat_axis,
    conv3d,
    dense,
    dropout3d,
    global_avg_pool,
    grad_check,
    matmul_batched,
    maxpool3d,
    reduce_max,
    relu,
    softmax_axis,
    split_axis,
    tmean,
    topo_order,
    trilinear_upsample,
    tsum,
)


@pytest.fixture(autouse=True)
def f64():
    with config.precision_context("f64"):
        yield


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=shape)


# ---------------------------------------------------------------------------
# conv3d

def brute_conv3d(x, w, b, stride, padding):
    """Direct summation oracle, loops only."""
    B, cin, D, H, W = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding)))
    Do = (D + 2 * padding - k) // stride + 1
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, cout, Do, Ho, Wo))
    for bi in range(B):
        for co in range(cout):
            for d in range(Do):
                for h in range(Ho):
                    for wi in range(Wo):
                        patch = xp[bi, :, d * stride : d * stride + k, h * stride : h * stride + k, wi * stride : wi * stride + k]
                        out[bi, co, d, h, wi] = (patch * w[co]).sum() + b[co]
    return out


def test_conv3d_identity_kernel():
    x = Tensor(rand((1, 1, 3, 4, 5)))
    w = Tensor(np.ones((1, 1, 1, 1, 1)))
    b = Tensor(np.zeros(1))
    out = conv3d(x, w, b, stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv3d_all_ones_sum_27():
    x = Tensor(np.ones((1, 1, 3, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3, 3)))
    b = Tensor(np.zeros(1))
    out = conv3d(x, w, b, stride=1, padding=0)
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.item() == 27.0


def test_conv3d_output_shape_formula():
    # 128x192x112 input, k=7, stride 2, padding 3 -> 64x96x56
    x = Tensor(np.zeros((1, 1, 128, 192, 112), dtype=np.float64))
    w = Tensor(np.zeros((32, 1, 7, 7, 7)))
    out = conv3d(x, w, None, stride=2, padding=3)
    assert out.shape == (1, 32, 64, 96, 56)


def test_conv3d_matches_brute_force():
    x = rand((2, 3, 4, 5, 4), seed=1)
    w = rand((2, 3, 3, 3, 3), seed=2)
    b = rand((2,), seed=3)
    got = conv3d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    want = brute_conv3d(x, w, b, stride=2, padding=1)
    np.testing.assert_allclose(got.data, want, rtol=1e-10)


def test_conv3d_channel_mismatch_error():
    x = Tensor(np.zeros((1, 2, 4, 4, 4)))
    w = Tensor(np.zeros((3, 5, 3, 3, 3)))
    with pytest.raises(ShapeError) as e:
        conv3d(x, w, None)
    assert "2" in str(e.value) and "5" in str(e.value)


def test_conv3d_gradients():
    x = Tensor(rand((1, 2, 3, 3, 3), seed=4))
    w = Tensor(rand((2, 2, 3, 3, 3), seed=5), requires_grad=True)
    b = Tensor(rand((2,), seed=6), requires_grad=True)
    err = grad_check(lambda t: tsum(conv3d(t, w, b, stride=1, padding=1) ** 2.0), x)
    assert err < 1e-6
    # weight gradient as well
    x.requires_grad = False
    err_w = grad_check(lambda t: tsum(conv3d(x, t, b, stride=2, padding=1) ** 2.0), w)
    assert err_w < 1e-6


# ---------------------------------------------------------------------------
# batchnorm3d

def test_batchnorm_constant_input_zero_output():
    x = Tensor(np.full((2, 3, 2, 2, 2), 5.0))
    out = batchnorm3d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), BatchNormStats(3), mode="train")
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_batchnorm_moments():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 2, 3, 3, 3))
    out = batchnorm3d(Tensor(x), Tensor(np.full(2, 2.0)), Tensor(np.full(2, 3.0)), BatchNormStats(2), mode="train")
    mean = out.data.mean(axis=(0, 2, 3, 4))
    std = out.data.std(axis=(0, 2, 3, 4))
    np.testing.assert_allclose(mean, 3.0, atol=1e-8)
    np.testing.assert_allclose(std, 2.0, atol=1e-4)


def test_batchnorm_eval_identity():
    x = Tensor(rand((1, 2, 2, 2, 2), seed=8))
    out = batchnorm3d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormStats(2), mode="eval")
    np.testing.assert_allclose(out.data, x.data, atol=1e-4)


def test_batchnorm_gradients():
    gamma = Tensor(rand((2,), seed=9, lo=0.5, hi=1.5), requires_grad=True)
    beta = Tensor(rand((2,), seed=10), requires_grad=True)

    def f(t):
        stats = BatchNormStats(2)
        return tsum(batchnorm3d(t, gamma, beta, stats, mode="train") ** 2.0)

    x = Tensor(rand((2, 2, 2, 2, 2), seed=11))
    assert grad_check(f, x) < 1e-4
    x.requires_grad = False
    assert grad_check(lambda g: tsum(batchnorm3d(x, g, beta, BatchNormStats(2), "train") ** 2.0), gamma) < 1e-6


# ---------------------------------------------------------------------------
# elementwise / reductions

def test_relu_basic():
    out = relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])
    out2 = relu(Tensor([-3.0, -0.5]))
    np.testing.assert_array_equal(out2.data, [0.0, 0.0])


def test_relu_gradient():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    backward(tsum(relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_maxpool_distinct_values():
    vals = np.arange(8, dtype=float).reshape(1, 1, 2, 2, 2)
    out = maxpool3d(Tensor(vals), 2, 2)
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.item() == 7.0


def test_maxpool_constant_input():
    out = maxpool3d(Tensor(np.full((1, 2, 4, 4, 4), 3.5)), 2, 2)
    np.testing.assert_array_equal(out.data, 3.5)


def test_maxpool_ramp_window_scan():
    vals = np.arange(64, dtype=float).reshape(1, 1, 4, 4, 4)
    out = maxpool3d(Tensor(vals), 2, 2)
    # brute-force window scan oracle
    want = np.zeros((2, 2, 2))
    for d in range(2):
        for h in range(2):
            for w in range(2):
                want[d, h, w] = vals[0, 0, 2 * d : 2 * d + 2, 2 * h : 2 * h + 2, 2 * w : 2 * w + 2].max()
    np.testing.assert_array_equal(out.data[0, 0], want)


def test_maxpool_kernel_too_large():
    with pytest.raises(ShapeError):
        maxpool3d(Tensor(np.zeros((1, 1, 2, 2, 2))), 3, 3)


def test_maxpool_gradient_routes_to_argmax():
    vals = np.arange(8, dtype=float).reshape(1, 1, 2, 2, 2)
    x = Tensor(vals, requires_grad=True)
    backward(tsum(maxpool3d(x, 2, 2)))
    want = np.zeros_like(vals)
    want[0, 0, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(x.grad, want)


def test_gap_constant():
    out = global_avg_pool(Tensor(np.full((2, 3, 2, 2, 2), 4.25)))
    np.testing.assert_allclose(out.data, 4.25)


def test_gap_single_voxel():
    x = np.zeros((1, 1, 2, 2, 2))
    x[0, 0, 1, 0, 1] = 16.0
    out = global_avg_pool(Tensor(x))
    assert out.item() == 2.0


def test_gap_gradient_uniform():
    x = Tensor(rand((1, 2, 2, 3, 2), seed=12), requires_grad=True)
    backward(tsum(global_avg_pool(x)))
    np.testing.assert_allclose(x.grad, 1.0 / 12)


def test_dense_identity():
    x = Tensor(rand((3, 4), seed=13))
    out = dense(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, x.data)


def test_dense_ones_rows():
    out = dense(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones((2, 3))), Tensor([0.5, -0.5]))
    np.testing.assert_allclose(out.data, [[6.5, 5.5]])


def test_dense_zero_weight():
    out = dense(Tensor(rand((2, 3), seed=14)), Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0]))
    np.testing.assert_allclose(out.data, [[1.0, 2.0], [1.0, 2.0]])


def test_softmax_uniform_and_closed_form():
    np.testing.assert_allclose(softmax_axis(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])
    out = softmax_axis(Tensor([0.0, np.log(2.0)]), 0)
    np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-12)


def test_softmax_shift_invariance():
    x = rand((4, 5), seed=15)
    a = softmax_axis(Tensor(x), 1).data
    b = softmax_axis(Tensor(x + 7.3), 1).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_matmul_identity_and_hand_case():
    x = rand((2, 3, 3), seed=16)
    eye = np.broadcast_to(np.eye(3), (2, 3, 3)).copy()
    np.testing.assert_allclose(matmul_batched(Tensor(eye), Tensor(x)).data, x)
    ones = np.ones((1, 2, 2))
    np.testing.assert_allclose(matmul_batched(Tensor(ones), Tensor(ones)).data, 2.0)


def test_matmul_transpose_identity():
    a = rand((1, 3, 3), seed=17)
    b = rand((1, 3, 3), seed=18)
    ab_t = np.swapaxes(matmul_batched(Tensor(a), Tensor(b)).data, -1, -2)
    bt_at = matmul_batched(Tensor(np.swapaxes(b, -1, -2)), Tensor(np.swapaxes(a, -1, -2))).data
    np.testing.assert_allclose(ab_t, bt_at, atol=1e-12)


# ---------------------------------------------------------------------------
# split / concat

def test_split_concat_round_trip():
    x = rand((2, 4, 4, 6, 2), seed=19)
    parts = split_axis(Tensor(x), 2, 2)
    back = concat_axis(parts, 2)
    np.testing.assert_array_equal(back.data, x)


def test_split_depth_halves():
    parts = split_axis(Tensor(np.zeros((1, 3, 4, 5, 6))), 2, 2)
    assert [p.shape for p in parts] == [(1, 3, 2, 5, 6)] * 2


def test_split_quarters_index_bookkeeping():
    x = np.arange(2 * 4 * 2 * 2, dtype=float).reshape(1, 2, 4, 2, 2)
    halves = split_axis(Tensor(x), 2, 2)
    quarters = [q for h in halves for q in split_axis(h, 4, 2)]
    assert all(q.shape == (1, 2, 2, 2, 1) for q in quarters)
    np.testing.assert_array_equal(quarters[0].data, x[:, :, :2, :, :1])
    np.testing.assert_array_equal(quarters[3].data, x[:, :, 2:, :, 1:])


def test_split_non_divisible_error():
    with pytest.raises(ShapeError):
        split_axis(Tensor(np.zeros((1, 1, 5, 2, 2))), 2, 2)


@given(st.integers(0, 4), st.sampled_from([1, 2, 4]), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_split_concat_property(axis, parts, seed):
    x = np.random.default_rng(seed).normal(size=(4, 4, 4, 4, 4))
    t = Tensor(x)
    back = concat_axis(split_axis(t, axis, parts), axis)
    assert np.array_equal(back.data, x)


def test_split_concat_gradients():
    x = Tensor(rand((1, 2, 4, 2, 2), seed=20), requires_grad=True)
    parts = split_axis(x, 2, 2)
    loss = tsum(parts[0] * 2.0) + tsum(parts[1] * 3.0)
    backward(loss)
    assert np.all(x.grad[:, :, :2] == 2.0) and np.all(x.grad[:, :, 2:] == 3.0)


# ---------------------------------------------------------------------------
# dropout

def test_dropout_rate_zero_identity():
    x = Tensor(rand((1, 4, 2, 2, 2), seed=21))
    out = dropout3d(x, 0.0, np.random.default_rng(0), "train")
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_eval_identity():
    x = Tensor(rand((1, 4, 2, 2, 2), seed=22))
    out = dropout3d(x, 0.9, None, "eval")
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_seeded_replay():
    x = Tensor(np.ones((1, 8, 2, 2, 2)))
    a = dropout3d(x, 0.5, np.random.default_rng(3), "train").data
    b = dropout3d(x, 0.5, np.random.default_rng(3), "train").data
    np.testing.assert_array_equal(a, b)
    kept = a[0, :, 0, 0, 0]
    assert set(np.unique(kept)) <= {0.0, 2.0}
    # whole channels share their fate
    for c in range(8):
        assert np.all(a[0, c] == kept[c])


# ---------------------------------------------------------------------------
# trilinear upsample

def test_trilinear_identity():
    x = rand((1, 2, 3, 4, 5), seed=23)
    out = trilinear_upsample(Tensor(x), (3, 4, 5))
    np.testing.assert_allclose(out.data, x, atol=1e-12)


def test_trilinear_constant():
    out = trilinear_upsample(Tensor(np.full((1, 1, 2, 2, 2), 1.5)), (5, 7, 3))
    np.testing.assert_allclose(out.data, 1.5, atol=1e-12)


def test_trilinear_ramp():
    x = np.array([0.0, 1.0]).reshape(1, 1, 2, 1, 1)
    out = trilinear_upsample(Tensor(x), (3, 1, 1))
    np.testing.assert_allclose(out.data[0, 0, :, 0, 0], [0.0, 0.5, 1.0], atol=1e-12)


def test_trilinear_gradient():
    x = Tensor(rand((1, 1, 2, 3, 2), seed=24))
    assert grad_check(lambda t: tsum(trilinear_upsample(t, (3, 5, 4)) ** 2.0), x) < 1e-7


# ---------------------------------------------------------------------------
# backward / grad_check harness

def test_backward_sum_ones():
    x = Tensor(rand((3, 4), seed=25), requires_grad=True)
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(tsum(x ** 2.0))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = Tensor(rand((2, 2), seed=26), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_topological_order_invariant():
    x = Tensor(rand((2, 2), seed=27), requires_grad=True)
    y = x * 2.0 + x ** 2.0
    loss = tsum(y)
    order = topo_order(loss)
    pos = {id(t): i for i, t in enumerate(order)}
    for node in order:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_grad_check_sum_exact():
    # both sides are 1 up to the rounding of x +/- h
    assert grad_check(tsum, Tensor(rand((2, 3), seed=28))) < 1e-10


def test_grad_check_sum_of_squares():
    assert grad_check(lambda t: tsum(t ** 2.0), Tensor(rand((2, 3), seed=29))) < 1e-7


def test_grad_check_conv_bn_softmax_composite():
    w = Tensor(rand((2, 1, 3, 3, 3), seed=30), requires_grad=True)
    b = Tensor(rand((2,), seed=31), requires_grad=True)
    gamma = Tensor(np.ones(2), requires_grad=True)
    beta = Tensor(np.zeros(2), requires_grad=True)

    def f(t):
        h = conv3d(t, w, b, stride=1, padding=1)
        h = batchnorm3d(h, gamma, beta, BatchNormStats(2), mode="train")
        h = global_avg_pool(h)
        p = softmax_axis(h, 1)
        return tsum(p * p)

    x = Tensor(rand((2, 1, 3, 3, 3), seed=32, lo=0.2, hi=1.0))
    assert grad_check(f, x) < 1e-4


def test_reduce_max_and_clamp():
    x = Tensor([1.0, 5.0, 5.0, 2.0], requires_grad=True)
    backward(reduce_max(x))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0, 0.0])
    y = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
    backward(tsum(clamp(y, 0.0, 1.0)))
    np.testing.assert_array_equal(y.grad, [0.0, 1.0, 0.0])


def test_deterministic_replay_bitwise():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 2, 3, 3, 3)), requires_grad=True)
        h = conv3d(x, w, None, stride=1, padding=1)
        h = dropout3d(h, 0.3, np.random.default_rng(7), "train")
        loss = tsum(h ** 2.0)
        backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
