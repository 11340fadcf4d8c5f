import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ssmaf.engine import NotSPDError, RunningStats, Tape, TapeError, TensorND, cholesky_logdet, ops, solve
from ssmaf.engine.gradcheck import check_gradients


def t(a, grad=False):
    return TensorND(np.asarray(a, dtype=float), requires_grad=grad)


# -- conv2d ----------------------------------------------------------------

def test_conv_identity_kernel():
    out = ops.conv2d(t([[[5.0]]]), t([[[[1.0]]]]))
    assert out.data.tolist() == [[[5.0]]]


def test_conv_ones_padded():
    out = ops.conv2d(t(np.ones((1, 3, 3))), t(np.ones((1, 1, 3, 3))), padding=1).data[0]
    ref = oracles.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), padding=1)[0, 0]
    np.testing.assert_array_equal(out, ref)
    assert out[1, 1] == 9
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4


def test_conv_dilated_footprint():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    out = ops.conv2d(t(x), t(np.ones((1, 1, 3, 3))), padding=2, dilation=2).data[0]
    ref = oracles.conv2d(x[None], np.ones((1, 1, 3, 3)), padding=2, dilation=2)[0, 0]
    np.testing.assert_array_equal(out, ref)
    expected = np.zeros((5, 5))
    for dy in (-2, 0, 2):
        for dx in (-2, 0, 2):
            expected[2 + dy, 2 + dx] = 1
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 3, 3), (2, 0, 2)])
def test_conv_matches_naive(stride, padding, dilation):
    rng = np.random.default_rng(stride * 100 + padding * 10 + dilation)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = ops.conv2d(t(x), t(w), t(b), stride=stride, padding=padding, dilation=dilation).data
    ref = oracles.conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError, match="channels"):
        ops.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="larger than padded"):
        ops.conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 3, 3))))


@settings(max_examples=30, deadline=None)
@given(k=st.sampled_from([1, 3, 5]), dilation=st.integers(1, 3), h=st.integers(1, 9), w=st.integers(1, 9))
def test_conv_same_padding_preserves_extent(k, dilation, h, w):
    pad = dilation * (k - 1) // 2
    out = ops.conv2d(t(np.ones((1, 1, h, w))), t(np.ones((1, 1, k, k))), padding=pad, dilation=dilation)
    assert out.shape[2:] == (h, w)


# -- batch norm ------------------------------------------------------------

def test_batch_norm_constant_input():
    stats = RunningStats(1)
    out = ops.batch_norm(t(np.full((2, 1, 2, 2), 3.0)), t([1.0]), t([0.0]), stats, training=True)
    assert np.all(out.data == 0)


def test_batch_norm_two_values():
    stats = RunningStats(1)
    out = ops.batch_norm(t(np.array([1.0, 3.0]).reshape(2, 1, 1, 1)), t([1.0]), t([0.0]), stats, training=True)
    expected = 1.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out.data.ravel(), [-expected, expected], rtol=1e-15)
    assert abs(out.data.ravel()[1] - 0.999995) < 1e-7


def test_batch_norm_affine():
    stats = RunningStats(1)
    x = np.array([-1.0, 1.0]).reshape(2, 1, 1, 1)
    out = ops.batch_norm(t(x), t([2.0]), t([5.0]), stats, training=True, eps=1e-300)
    np.testing.assert_allclose(out.data.ravel(), [3.0, 7.0])


def test_batch_norm_eval_before_training_uses_unit_stats():
    stats = RunningStats(2)
    x = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
    out = ops.batch_norm(t(x), t([1.0, 1.0]), t([0.0, 0.0]), stats, training=False)
    np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5))


def test_batch_norm_running_stats_update():
    stats = RunningStats(1, momentum=0.1)
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    ops.batch_norm(t(x), t([1.0]), t([0.0]), stats, training=True)
    np.testing.assert_allclose(stats.mean, [0.2])
    # unbiased variance of {1, 3} is 2
    np.testing.assert_allclose(stats.var, [0.9 + 0.2])


# -- pixel shuffle / interpolation -----------------------------------------

def test_pixel_shuffle_r1_identity():
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 5))
    np.testing.assert_array_equal(ops.pixel_shuffle(t(x), 1).data, x)


def test_pixel_shuffle_layout():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
    np.testing.assert_array_equal(ops.pixel_shuffle(t(x), 2).data[0, 0], [[1, 2], [3, 4]])


def test_pixel_shuffle_matches_index_map():
    x = np.random.default_rng(2).normal(size=(2, 8, 2, 2))
    np.testing.assert_array_equal(ops.pixel_shuffle(t(x), 2).data, oracles.pixel_shuffle(x, 2))


def test_pixel_shuffle_rejects_channels():
    with pytest.raises(ValueError, match="divisible"):
        ops.pixel_shuffle(t(np.zeros((1, 3, 2, 2))), 2)


@settings(max_examples=25, deadline=None)
@given(r=st.integers(1, 3), c=st.integers(1, 3), h=st.integers(1, 4), w=st.integers(1, 4))
def test_pixel_shuffle_inverse_is_identity(r, c, h, w):
    x = np.arange(c * r * r * h * w, dtype=float).reshape(1, c * r * r, h, w)
    y = ops.pixel_shuffle(t(x), r).data
    back = y.reshape(1, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape)
    np.testing.assert_array_equal(back, x)


def test_bilinear_constant():
    out = ops.interpolate_bilinear(t(np.full((1, 2, 3, 4), 0.7)), 2).data
    np.testing.assert_allclose(out, 0.7, rtol=0, atol=1e-15)
    assert out.shape == (1, 2, 6, 8)


def test_bilinear_row():
    out = ops.interpolate_bilinear(t(np.array([0.0, 1.0]).reshape(1, 1, 1, 2)), 2).data
    np.testing.assert_allclose(out[0, 0, 0], [0.0, 0.25, 0.75, 1.0])


def test_bilinear_scale_one_identity():
    x = np.random.default_rng(3).normal(size=(1, 2, 3, 3))
    np.testing.assert_array_equal(ops.interpolate_bilinear(t(x), 1).data, x)


# -- elementwise and reductions --------------------------------------------

def test_sigmoid_value_and_slope():
    x = t([0.0], grad=True)
    with Tape() as tape:
        y = ops.sigmoid(x)
    tape.backward(y)
    assert y.item() == 0.5
    assert x.grad[0] == 0.25


def test_sigmoid_saturates_exactly():
    y = ops.sigmoid(t([-1e4, 1e4])).data
    assert y[0] == 0.0 and y[1] == 1.0


def test_softmax_equal_logits():
    s = ops.softmax(t(np.zeros((1, 2, 3, 3)))).data
    assert np.all(s == 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_is_distribution(seed):
    x = np.random.default_rng(seed).normal(scale=5, size=(2, 3, 4, 4))
    s = ops.softmax(t(x)).data
    assert np.all((s > 0) & (s < 1))
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_max_pool():
    assert ops.max_pool2d(t(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.tolist() == [[[[4.0]]]]


def test_concat_rejects_mismatch():
    with pytest.raises(ValueError):
        ops.concat([t(np.zeros((1, 2, 3, 3))), t(np.zeros((1, 2, 4, 3)))])


def test_add_rejects_nonconforming():
    with pytest.raises(ValueError):
        ops.add(t(np.zeros((2, 3))), t(np.zeros((4, 3))))


# -- linear algebra --------------------------------------------------------

def test_logdet_identity():
    assert cholesky_logdet(t(np.eye(3))).item() == 0.0


def test_logdet_diagonal():
    assert abs(cholesky_logdet(t(np.diag([2.0, 3.0]))).item() - math.log(6)) < 1e-15
    assert abs(math.log(6) - 1.791759) < 1e-6


def test_logdet_matches_naive_determinant():
    rng = np.random.default_rng(4)
    for _ in range(10):
        a = rng.normal(size=(4, 4))
        spd = a @ a.T + np.eye(4)
        assert abs(cholesky_logdet(t(spd)).item() - math.log(oracles.determinant(spd))) < 1e-10


def test_logdet_rejects_indefinite():
    with pytest.raises(NotSPDError):
        cholesky_logdet(t(np.diag([1.0, -1.0])))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_logdet_of_inverse_cancels(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    spd = a @ a.T + 0.5 * np.eye(n)
    total = cholesky_logdet(t(spd)).item() + cholesky_logdet(t(np.linalg.inv(spd))).item()
    assert abs(total) < 1e-8


def test_solve_matches_inverse():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    b = rng.normal(size=(3, 2))
    np.testing.assert_allclose(solve(t(a), t(b)).data, oracles.inverse(a) @ b, rtol=1e-10)


# -- tape ------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = t(np.random.default_rng(6).normal(size=(3, 4)), grad=True)
    with Tape() as tape:
        loss = ops.sum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_twice_rejected():
    x = t([1.0, 2.0], grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_backward_needs_scalar():
    x = t([1.0, 2.0], grad=True)
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_unreachable_param_gets_zero_grad():
    x = t([1.0, 2.0], grad=True)
    unused = t([3.0], grad=True)
    with Tape() as tape:
        loss = ops.sum(x)
    tape.backward(loss, params=[x, unused])
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_no_recording_outside_tape():
    x = t([1.0], grad=True)
    y = ops.mul(x, 3.0)
    assert y.node_id is None and not y.requires_grad


def test_tape_nodes_are_topological():
    x = t(np.ones((1, 1, 4, 4)), grad=True)
    with Tape() as tape:
        y = ops.relu(ops.conv2d(x, t(np.ones((1, 1, 3, 3)), grad=True), padding=1))
        ops.sum(ops.mul(y, y))
        for nid, node in enumerate(tape.nodes):
            for inp in node.inputs:
                assert inp.node_id is None or inp.node_id < nid


def test_mse_of_conv_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = t(rng.normal(size=(1, 1, 4, 4)))
    w = t(rng.normal(size=(1, 1, 3, 3)))
    target = rng.normal(size=(1, 1, 4, 4))

    def loss(x, w):
        d = ops.sub(ops.conv2d(x, w, padding=1), target)
        return ops.mean(ops.mul(d, d))

    assert check_gradients(loss, [x, w]) < 1e-4


def test_composite_chain_matches_finite_differences():
    rng = np.random.default_rng(8)
    x = t(rng.normal(size=(2, 2, 4, 4)))
    w = t(rng.normal(size=(3, 2, 3, 3)))
    gamma = t(rng.uniform(0.5, 1.5, size=3))
    beta = t(rng.normal(size=3))
    proj = rng.normal(size=(2, 3, 4, 4))

    def loss(x, w, gamma, beta):
        y = ops.batch_norm(ops.conv2d(x, w, padding=1), gamma, beta, RunningStats(3), training=True)
        return ops.sum(ops.mul(ops.sigmoid(y), proj))

    assert check_gradients(loss, [x, w, gamma, beta]) < 1e-4
