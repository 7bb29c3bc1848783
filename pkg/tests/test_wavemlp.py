import numpy as np
import pytest

from handsynth import tensor as T
from handsynth.tensor import Tensor
from handsynth.wavemlp import PATM, ChannelMLP, TokenMixing, WaveGBlock, estimate_phase, patm_forward


@pytest.fixture(autouse=True)
def float64():
    with T.default_dtype(np.float64):
        yield


def identity_patm(channels, n, axis, rng):
    p = PATM(channels, n, axis, rng)
    p.w_t.data = np.eye(n)
    p.w_i.data = np.zeros((n, n))
    return p


@pytest.mark.parametrize("axis", ["height", "width"])
def test_patm_identity_is_exact(axis, rng):
    f = Tensor(rng.standard_normal((2, 3, 4, 4)))
    p = identity_patm(3, 4, axis, rng)
    out = patm_forward(f, p, Tensor(np.zeros(f.shape)))
    np.testing.assert_array_equal(out.data, f.data)


def test_patm_quarter_turn_uses_imaginary_branch(rng):
    f = Tensor(rng.standard_normal((1, 2, 3, 5)))
    p = PATM(2, 5, "width", rng)
    p.w_t.data = np.zeros((5, 5))
    p.w_i.data = np.eye(5)
    out = patm_forward(f, p, Tensor(np.full(f.shape, np.pi / 2)))
    np.testing.assert_allclose(out.data, f.data, atol=1e-12)


def test_patm_two_token_hand_example(rng):
    f = Tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
    p = PATM(1, 2, "width", rng)
    p.w_t.data = np.ones((2, 2))
    p.w_i.data = np.zeros((2, 2))
    out = patm_forward(f, p, Tensor(np.array([0.0, np.pi]).reshape(1, 1, 1, 2)))
    np.testing.assert_allclose(out.data.ravel(), [-1.0, -1.0], atol=1e-12)


def test_patm_linear_in_amplitude_at_fixed_phase(rng):
    f = Tensor(rng.standard_normal((2, 3, 4, 6)))
    theta = Tensor(rng.standard_normal(f.shape))
    p = PATM(3, 6, "width", rng)
    np.testing.assert_allclose(patm_forward(Tensor(2.5 * f.data), p, theta).data,
                               2.5 * patm_forward(f, p, theta).data, rtol=1e-12)


def test_patm_slices_weights_for_short_sequences(rng):
    p = PATM(2, 8, "width", rng)
    assert p(Tensor(rng.standard_normal((1, 2, 3, 5)))).shape == (1, 2, 3, 5)
    with pytest.raises(ValueError, match="exceed"):
        p(Tensor(rng.standard_normal((1, 2, 3, 9))))


def test_patm_rejects_unknown_axis(rng):
    with pytest.raises(ValueError, match="axis"):
        PATM(2, 4, "depth", rng)


def test_estimate_phase_zero_weights_gives_bias(rng):
    p = PATM(3, 4, "height", rng)
    p.phase_proj.weight.data = np.zeros((3, 3))
    p.phase_proj.bias.data = np.array([[0.1], [0.2], [0.3]])
    theta = estimate_phase(Tensor(rng.standard_normal((2, 3, 4, 5))), p.phase_proj)
    assert theta.shape == (2, 3, 4, 5)
    np.testing.assert_allclose(theta.data[1, :, 2, 3], [0.1, 0.2, 0.3])


def test_phase_projection_receives_gradient(rng):
    p = PATM(3, 4, "height", rng)
    T.tsum(p(Tensor(rng.standard_normal((2, 3, 4, 5))))).backward()
    assert np.abs(p.phase_proj.weight.grad).sum() > 0


def test_token_mix_equal_gates_average_branches(rng):
    tm = TokenMixing(8, 4, 16, rng)
    tm.gate_fc2.weight.data[:] = 0.0
    tm.gate_fc2.bias.data[:] = 0.0
    f = Tensor(rng.standard_normal((2, 8, 4, 16)))
    out = tm(f)
    assert out.shape == (2, 8, 4, 16)
    mean = sum(b.data for b in tm.branches(f)) / 3
    np.testing.assert_allclose(out.data, mean, rtol=1e-10)


def test_height_branch_commutes_with_horizontal_shift(rng):
    tm = TokenMixing(3, 4, 8, rng)
    f = rng.standard_normal((1, 3, 4, 8))
    shifted = np.roll(f, 3, axis=3)
    out = tm.patm_h(Tensor(f)).data
    np.testing.assert_allclose(tm.patm_h(Tensor(shifted)).data, np.roll(out, 3, axis=3), atol=1e-12)


def test_channel_mlp_degenerate_identity_and_per_token(rng):
    mlp = ChannelMLP(3, 3, rng, ratio=1)
    mlp.fc1.weight.data = np.eye(3)
    mlp.fc2.weight.data = np.eye(3)
    f = rng.uniform(0.1, 1.0, (2, 3, 2, 4))
    np.testing.assert_allclose(mlp(Tensor(f)).data, f, rtol=1e-12)
    g = rng.standard_normal((2, 3, 2, 4))
    perm = rng.permutation(8)
    flat = g.reshape(2, 3, 8)
    out = mlp(Tensor(flat[:, :, perm].reshape(2, 3, 2, 4))).data.reshape(2, 3, 8)
    ref = mlp(Tensor(g)).data.reshape(2, 3, 8)[:, :, perm]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_wavegblock_shapes(rng):
    up = WaveGBlock(8, 4, 6, max_h=8, max_w=32, rng=rng)
    assert up(Tensor(rng.standard_normal((2, 8, 4, 16))), Tensor(rng.standard_normal((2, 6)))).shape == (2, 4, 8, 32)
    flat = WaveGBlock(4, 4, 6, max_h=4, max_w=16, rng=rng, upsample=False)
    assert flat(Tensor(rng.standard_normal((2, 4, 4, 16))), Tensor(rng.standard_normal((2, 6)))).shape == (2, 4, 4, 16)
    with pytest.raises(ValueError, match="channels"):
        up(Tensor(rng.standard_normal((2, 5, 4, 16))), Tensor(rng.standard_normal((2, 6))))


def test_wavegblock_zeroed_branches_leave_residual(rng):
    blk = WaveGBlock(4, 2, 6, max_h=8, max_w=8, rng=rng)
    blk.mlp.fc2.weight.data[:] = 0.0
    blk.mlp.fc2.bias.data[:] = 0.0
    f = rng.standard_normal((2, 4, 4, 4))
    out = blk(Tensor(f), Tensor(rng.standard_normal((2, 6)))).data
    up = f.repeat(2, axis=2).repeat(2, axis=3)
    ref = np.einsum("oc,bchw->bohw", blk.shortcut.weight.data, up)
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)
