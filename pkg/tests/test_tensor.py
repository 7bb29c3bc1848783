import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays, broadcastable_shapes

from handsynth import tensor as T
from handsynth.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_default_dtype_is_float32_and_context_switches():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_add_broadcast_gradient_sums_over_broadcast_axes():
    with T.default_dtype(np.float64):
        a = leaf(np.ones((3, 4)))
        b = leaf(np.ones(4))
        (a + b).sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones((3, 4)))
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_incompatible_shapes_raise():
    with pytest.raises(ValueError, match="broadcastable"):
        T.add(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))))
    with pytest.raises(ValueError, match="inner dimensions"):
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))


def test_matmul_gradient_matches_closed_form(rng):
    with T.default_dtype(np.float64):
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
        g = rng.standard_normal((3, 2))
        (a @ b).backward(g)
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-12)


def test_batched_matmul_with_shared_matrix(rng):
    with T.default_dtype(np.float64):
        a, b = leaf(rng.standard_normal((2, 3, 4, 5))), leaf(rng.standard_normal((5, 3)))
        g = rng.standard_normal((2, 3, 4, 3))
        (a @ b).backward(g)
    ref = np.einsum("abij,abik->jk", a.data, g)
    np.testing.assert_allclose(b.grad, ref, rtol=1e-10)


def test_gradient_accumulates_over_reuse():
    with T.default_dtype(np.float64):
        x = leaf([2.0])
        y = x * x + x
        y.sum().backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_backward_multiple_roots():
    with T.default_dtype(np.float64):
        x = leaf([1.0, 2.0])
        a, b = x * 3.0, x * x
        T.backward([a, b], [np.ones(2), np.array([1.0, 0.5])])
    np.testing.assert_allclose(x.grad, [3 + 2, 3 + 2])


def test_nonscalar_backward_needs_gradient():
    with pytest.raises(ValueError, match="explicit gradient"):
        (leaf([1.0, 2.0]) * 2).backward()


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2
    assert not y.requires_grad


def test_detach_blocks_gradient():
    x = leaf([1.0, 2.0])
    y = (x.detach() * x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, [1.0, 2.0])


def test_conv2d_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 2))
    b = rng.standard_normal(4)
    with T.default_dtype(np.float64):
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=(2, 1), padding=(1, 0)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
    Ho, Wo = out.shape[2:]
    ref = np.zeros_like(out)
    for i in range(Ho):
        for j in range(Wo):
            patch = xp[:, :, 2 * i:2 * i + 3, j:j + 2]
            ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)


def test_conv2d_grouped_matches_per_group(rng):
    x = rng.standard_normal((1, 4, 4, 4))
    w = rng.standard_normal((6, 2, 2, 2))
    with T.default_dtype(np.float64):
        out = T.conv2d(Tensor(x), Tensor(w), stride=2, groups=2).data
        a = T.conv2d(Tensor(x[:, :2]), Tensor(w[:3]), stride=2).data
        b = T.conv2d(Tensor(x[:, 2:]), Tensor(w[3:]), stride=2).data
    np.testing.assert_allclose(out, np.concatenate([a, b], axis=1), rtol=1e-12)


def test_conv2d_invalid_geometry_names_extents():
    with pytest.raises(ValueError, match="output extents"):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ValueError, match="groups"):
        T.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 1, 1, 1))), groups=2)


def test_sort_routes_gradient_through_permutation():
    with T.default_dtype(np.float64):
        x = leaf([3.0, 1.0, 2.0])
        T.sort(x).backward(np.array([10.0, 20.0, 30.0]))
    np.testing.assert_allclose(x.grad, [30.0, 10.0, 20.0])


def test_log_softmax_rows_normalize(rng):
    out = T.log_softmax(Tensor(rng.standard_normal((4, 7)) * 50)).data
    np.testing.assert_allclose(np.exp(out).sum(-1), 1.0, rtol=1e-5)
    assert np.isfinite(out).all()


def test_complex_angle_negative_real_axis_is_pi():
    ang = T.complex_angle(Tensor([-1.0, -1.0]), Tensor([0.0, -0.0])).data
    np.testing.assert_allclose(ang, [np.pi, np.pi])


def test_complex_polar_zero_below_threshold():
    re, im = leaf([0.0, 3.0]), leaf([0.0, 4.0])
    (T.complex_abs(re, im) + T.complex_angle(re, im)).sum().backward()
    assert re.grad[0] == 0 and im.grad[0] == 0
    np.testing.assert_allclose(T.complex_abs(re, im).data, [0.0, 5.0])


def test_debug_sentinel_flags_non_finite():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError, match="log"):
            T.log(Tensor([-1.0]))
    finally:
        T.set_debug(False)


def test_upsample_nearest_repeats_blocks():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    out = T.upsample_nearest2d(x, 2).data[0, 0]
    np.testing.assert_array_equal(out[:2, :2], 0.0)
    np.testing.assert_array_equal(out[2:, 2:], 3.0)


def test_elementwise_dispatch_rejects_unknown():
    with pytest.raises(ValueError, match="unknown"):
        T.elementwise("frobnicate", Tensor([1.0]))
    np.testing.assert_allclose(T.elementwise("mul", Tensor([2.0]), 3.0).data, [6.0])


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_unbroadcast_inverts_broadcasting(data):
    shape = data.draw(broadcastable_shapes(shape=(3, 1, 4), min_dims=1, max_dims=4))
    out_shape = np.broadcast_shapes(shape, (3, 1, 4))
    g = data.draw(arrays(np.float64, out_shape, elements=st.floats(-10, 10)))
    red = T.unbroadcast(g, tuple(shape))
    assert red.shape == tuple(shape)
    np.testing.assert_allclose(red.sum(), g.sum(), rtol=1e-9, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-5, 5)))
def test_sum_of_mean_gradient_is_uniform(x):
    t = leaf(x)
    T.mean(t).backward()
    np.testing.assert_allclose(t.grad, np.full((3, 5), 1 / 15))
