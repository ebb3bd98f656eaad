import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from i2i3d import ops
from i2i3d.gradcheck import grad_check
from i2i3d.tensor import Tape, Tensor, emit, flat_index, unflat_index

from conftest import conv3d_nested_loops


def small_shape(rng, c=None, even=False):
    ext = [int(rng.integers(1, 4)) * 2 if even else int(rng.integers(1, 7)) for _ in range(3)]
    return (int(rng.integers(1, 3)), c or int(rng.integers(1, 4)), *ext)


# -- layout -------------------------------------------------------------------


@given(st.lists(st.integers(1, 5), min_size=5, max_size=5), st.data())
def test_layout_round_trip(shape, data):
    index = tuple(data.draw(st.integers(0, e - 1)) for e in shape)
    off = flat_index(shape, index)
    assert unflat_index(shape, off) == index
    assert np.zeros(shape).reshape(-1)[off] == 0  # in range
    arr = np.arange(np.prod(shape)).reshape(shape)
    assert arr[index] == off


def test_w_is_fastest_axis():
    shape = (2, 3, 4, 5, 6)
    assert flat_index(shape, (0, 0, 0, 0, 1)) == 1
    assert flat_index(shape, (0, 0, 0, 1, 0)) == 6
    assert flat_index(shape, (1, 0, 0, 0, 0)) == 3 * 4 * 5 * 6


def test_rejects_empty_extent():
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 0, 2, 2, 2)))


# -- conv3d -------------------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = Tensor(rng.standard_normal((1, 1, 4, 5, 6)))
    y = ops.conv3d(x, Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_counting_case():
    x = Tensor(np.ones((1, 1, 5, 5, 5)))
    y = ops.conv3d(x, Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))
    assert y.data[0, 0, 2, 2, 2] == 27.0
    assert y.data[0, 0, 0, 0, 0] == 8.0  # corner sees a 2x2x2 block under zero padding


@pytest.mark.parametrize("backend", ["im2col", "loop"])
def test_conv_matches_nested_loops(rng, backend):
    x = rng.standard_normal((1, 2, 5, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    expected = conv3d_nested_loops(x, w, b)
    got = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), backend=backend).data
    assert np.max(np.abs(got - expected)) / np.max(np.abs(expected)) <= 1e-5


def test_conv_backends_agree_float32(rng):
    x = rng.standard_normal((2, 3, 6, 4, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32)
    a = ops.conv3d_forward(x, w, backend="im2col")
    b = ops.conv3d_forward(x, w, backend="loop")
    assert np.max(np.abs(a - b)) / np.max(np.abs(b)) <= 1e-5


def test_conv_shape_mismatch_names_both_shapes():
    x = Tensor(np.zeros((1, 2, 4, 4, 4)))
    w = Tensor(np.zeros((1, 3, 3, 3, 3)))
    with pytest.raises(ValueError, match=r"\(1, 2, 4, 4, 4\).*\(1, 3, 3, 3, 3\)"):
        ops.conv3d(x, w)


def test_conv_rejects_even_kernel():
    with pytest.raises(ValueError, match="odd"):
        ops.conv3d(Tensor(np.zeros((1, 1, 4, 4, 4))), Tensor(np.zeros((1, 1, 2, 3, 3))))


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linearity(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 1, 2, 4, 3, 5))
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
    lhs = ops.conv3d(Tensor(alpha * x + beta * y), w).data
    rhs = alpha * ops.conv3d(Tensor(x), w).data + beta * ops.conv3d(Tensor(y), w).data
    scale = max(np.max(np.abs(rhs)), 1e-12)
    assert np.max(np.abs(lhs - rhs)) / scale <= 1e-5


# -- pooling and upsampling -------------------------------------------------------


def test_avg_pool_constant():
    y = ops.avg_pool3d(Tensor(np.full((1, 2, 4, 6, 2), 3.25)))
    assert y.shape == (1, 2, 2, 3, 1)
    assert np.all(y.data == 3.25)


def test_avg_pool_block_values():
    x = np.arange(1, 9, dtype=float).reshape(1, 1, 2, 2, 2)
    assert ops.avg_pool3d(Tensor(x)).data.item() == 4.5


def test_avg_pool_matches_blockwise_mean(rng):
    x = rng.standard_normal((2, 3, 4, 6, 8))
    got = ops.avg_pool3d(Tensor(x)).data
    expected = np.zeros((2, 3, 2, 3, 4))
    for idx in np.ndindex(*expected.shape):
        n, c, d, h, w = idx
        b = x[n, c, 2 * d : 2 * d + 2, 2 * h : 2 * h + 2, 2 * w : 2 * w + 2]
        # pairwise tree: (w pairs) -> (h pairs) -> (d pairs)
        expected[idx] = (((b[0, 0, 0] + b[0, 0, 1]) + (b[0, 1, 0] + b[0, 1, 1])) + ((b[1, 0, 0] + b[1, 0, 1]) + (b[1, 1, 0] + b[1, 1, 1]))) / 8
    np.testing.assert_array_equal(got, expected)


def test_avg_pool_rejects_odd():
    with pytest.raises(ValueError, match="divisible"):
        ops.avg_pool3d(Tensor(np.zeros((1, 1, 3, 4, 4))))


@given(st.integers(0, 10_000))
def test_avg_pool_preserves_mean(seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 4, 2, 6))
    assert abs(ops.avg_pool3d(Tensor(x)).data.mean() - x.mean()) <= 1e-6


def test_upsample_nearest_single_voxel():
    y = ops.upsample3d(Tensor(np.full((1, 1, 1, 1, 1), 7.0)), mode="nearest")
    assert y.shape == (1, 1, 2, 2, 2) and np.all(y.data == 7.0)


@given(st.integers(0, 10_000))
def test_pool_inverts_nearest_upsample(seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 3, 2, 4))
    back = ops.avg_pool3d(ops.upsample3d(Tensor(x), mode="nearest")).data
    np.testing.assert_array_equal(back, x)


def test_trilinear_preserves_linear_ramp():
    # samples of a*z + b at voxel centres; the upsampled grid has centres at (j + 0.5) / 2
    d, h, w = 4, 5, 6
    coef = np.array([0.7, -1.3, 2.1])
    grid = np.stack(np.meshgrid(*(np.arange(n) + 0.5 for n in (d, h, w)), indexing="ij"))
    x = np.tensordot(coef, grid, axes=1) + 0.4
    up = ops.upsample3d(Tensor(x[None, None]), mode="trilinear").data[0, 0]
    fine = np.stack(np.meshgrid(*((np.arange(2 * n) + 0.5) / 2 for n in (d, h, w)), indexing="ij"))
    analytic = np.tensordot(coef, fine, axes=1) + 0.4
    interior = (slice(1, -1),) * 3
    assert np.max(np.abs(up[interior] - analytic[interior])) <= 1e-6


# -- concat, sigmoid ---------------------------------------------------------------


def test_concat_channel_order(rng):
    a, b = rng.standard_normal((1, 2, 2, 3, 4)), rng.standard_normal((1, 3, 2, 3, 4))
    y = ops.concat_channels(Tensor(a), Tensor(b))
    assert y.shape[1] == 5
    np.testing.assert_array_equal(y.data[:, :2], a)
    np.testing.assert_array_equal(y.data[:, 2:], b)


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ValueError, match="spatial"):
        ops.concat_channels(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.zeros((1, 1, 2, 2, 4))))


def test_concat_zero_channels_rejected():
    # zero-channel tensors cannot even be constructed
    with pytest.raises(ValueError):
        ops.concat_channels(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.zeros((1, 0, 2, 2, 2))))


def test_concat_sum_gradient_routes_ones(rng, f64):
    a = Tensor(rng.standard_normal((1, 2, 2, 2, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 1, 2, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(ops.concat_channels(a, b))
    g = tape.backward(loss)
    assert np.all(g[a] == 1) and np.all(g[b] == 1)
    assert grad_check(lambda p, q: ops.sum_all(ops.concat_channels(p, q)), [a.data, b.data]) <= 1e-6


def test_sigmoid_values():
    s = ops.sigmoid(Tensor(np.array([0.0, 40.0, -40.0]))).data
    assert s[0] == 0.5
    assert abs(s[1] - 1.0) <= 1e-15 and abs(s[2]) <= 1e-15


def test_sigmoid_no_overflow():
    with np.errstate(over="raise"):
        s = ops.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert s[0] == 0.0 and s[1] == 1.0


def test_sigmoid_gradient_at_zero(f64):
    x = Tensor(np.zeros((1, 1, 1, 1, 1)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(ops.sigmoid(x))
    g = tape.backward(loss)[x].item()
    assert g == 0.25
    h = 1e-4
    numeric = (1 / (1 + np.exp(-h)) - 1 / (1 + np.exp(h))) / (2 * h)
    assert abs(g - numeric) <= 1e-6


# -- tape -------------------------------------------------------------------------


def test_backward_sum_is_ones(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(x)
    np.testing.assert_array_equal(tape.backward(loss)[x], np.ones(x.shape))


def test_backward_rejects_non_scalar(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ops.sigmoid(x)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_backward_rejects_foreign_loss(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2, 2)), requires_grad=True)
    with Tape():
        loss = ops.sum_all(x)
    with Tape() as other:
        ops.sum_all(ops.sigmoid(x))
    with pytest.raises(ValueError, match="not produced on this tape"):
        other.backward(loss)


def test_unreachable_gets_zero(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2, 2)), requires_grad=True)
    unused = Tensor(rng.standard_normal((1, 1, 2, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(x)
        ops.sum_all(unused)
    g = tape.backward(loss, [x, unused])
    assert np.all(g[unused] == 0)


def test_disjoint_branches_linear(rng, f64):
    x = Tensor(rng.standard_normal((1, 1, 2, 2, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((1, 1, 3, 3, 3)), requires_grad=True)
    with Tape() as t1:
        l1 = ops.sum_all(ops.sigmoid(x))
    with Tape() as t2:
        l2 = ops.sum_all(ops.conv3d(x, w))
    with Tape() as t3:
        both = ops.add(ops.sum_all(ops.sigmoid(x)), ops.sum_all(ops.conv3d(x, w)))
    g1, g2, g3 = t1.backward(l1, [x]), t2.backward(l2, [x, w]), t3.backward(both, [x, w])
    np.testing.assert_allclose(g3[x], g1[x] + g2[x], rtol=1e-12)
    np.testing.assert_allclose(g3[w], g2[w], rtol=1e-12)


def test_node_order_is_topological(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2, 2)), requires_grad=True)
    with Tape() as tape:
        ops.sum_all(ops.sigmoid(ops.relu(x)))
    produced = set()
    for node in tape.nodes:
        for t in node.inputs:
            assert t is x or id(t) in produced
        produced.add(id(node.output))


def test_conv_backward_float32_vs_float64(rng):
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    b = rng.standard_normal(2)

    def grads(dtype):
        ts = [Tensor(a.astype(dtype), requires_grad=True) for a in (x, w, b)]
        with Tape() as tape:
            loss = ops.sum_all(ops.sigmoid(ops.conv3d(*ts)))
        return tape.backward(loss, ts)

    g32, g64 = grads(np.float32), grads(np.float64)
    for k32, k64 in zip(g32.values(), g64.values()):
        assert np.max(np.abs(k32 - k64)) / np.max(np.abs(k64)) <= 1e-3


# -- grad_check harness ---------------------------------------------------------------


def test_grad_check_identity():
    rng = np.random.default_rng(0)
    assert grad_check(lambda x: ops.sum_all(x), [rng.standard_normal((1, 1, 2, 2, 2))]) <= 1e-10


def test_grad_check_conv(rng):
    arrays = [rng.standard_normal((1, 2, 3, 4, 3)), rng.standard_normal((2, 2, 3, 3, 3)), rng.standard_normal(2)]
    c = rng.standard_normal((1, 2, 3, 4, 3))
    assert grad_check(lambda x, w, b: ops.inner(ops.conv3d(x, w, b), c), arrays) <= 1e-6


def test_grad_check_flags_corrupted_gradient(rng):
    def bad_square(t):
        # forward x^2 with a deliberately wrong derivative 3x
        return emit("bad", t.data**2, (t,), lambda g: (3 * g * t.data,))

    x = rng.standard_normal((1, 1, 2, 2, 2)) + 2.0
    assert grad_check(lambda t: ops.sum_all(bad_square(t)), [x]) >= 1e-2


def test_determinism_bit_identical(rng):
    x = rng.standard_normal((1, 3, 6, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32)
    outs = [ops.conv3d(Tensor(x), Tensor(w)).data.tobytes() for _ in range(3)]
    assert len(set(outs)) == 1
