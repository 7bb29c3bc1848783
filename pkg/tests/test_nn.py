import numpy as np
import pytest

from handsynth import tensor as T
from handsynth.nn import (BatchNorm2d, ConditionalBatchNorm2d, Conv2d, Linear, SpectralNorm, evaluating, frozen,
                          masked_width_mean, spectral_normalize)
from handsynth.optim import ParameterStore, adam_step
from handsynth.tensor import Tensor


def test_spectral_norm_converges_to_unit_top_singular_value(rng):
    w = Tensor(rng.standard_normal((6, 4, 3, 3)))
    sn = SpectralNorm(6, 36, rng)
    for _ in range(50):
        out = spectral_normalize(w, sn)
    top = np.linalg.svd(out.data.reshape(6, -1), compute_uv=False)[0]
    assert top == pytest.approx(1.0, rel=1e-4)


def test_spectral_norm_frozen_state_in_eval(rng):
    lin = Linear(4, 3, rng, spectral=True)
    u = lin.sn.u.copy()
    with evaluating(lin):
        lin(Tensor(rng.standard_normal((2, 4))))
    np.testing.assert_array_equal(lin.sn.u, u)
    lin(Tensor(rng.standard_normal((2, 4))))
    assert not np.array_equal(lin.sn.u, u)


def test_spectral_norm_zero_matrix_is_finite(rng):
    out = spectral_normalize(Tensor(np.zeros((3, 3))), SpectralNorm(3, 3, rng))
    assert np.isfinite(out.data).all()


def test_batch_norm_train_and_eval_statistics(rng):
    bn = BatchNorm2d(3)
    x = rng.normal(2.0, 3.0, (8, 3, 4, 4)).astype(np.float32)
    y = bn(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)
    assert (bn.running_mean != 0).all()
    with evaluating(bn):
        a = bn(Tensor(x[:1])).data
        b = bn(Tensor(x[:1])).data
    np.testing.assert_array_equal(a, b)
    assert bn.training


def test_conditional_batch_norm_uses_style(rng):
    cbn = ConditionalBatchNorm2d(2, 4, rng)
    x = Tensor(rng.standard_normal((3, 2, 2, 2)).astype(np.float32))
    s1 = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    s2 = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    assert np.abs(cbn(x, s1).data - cbn(x, s2).data).max() > 0
    with pytest.raises(ValueError, match="batch size"):
        cbn(Tensor(np.zeros((1, 2, 2, 2), np.float32)), Tensor(np.zeros((1, 4), np.float32)))


def test_masked_width_mean_ignores_padding(rng):
    h = rng.standard_normal((2, 3, 2, 8)).astype(np.float32)
    out = masked_width_mean(Tensor(h), np.array([32, 64]), 64).data
    np.testing.assert_allclose(out[0], h[0, :, :, :4].mean(axis=(1, 2)), rtol=1e-6)
    np.testing.assert_allclose(out[1], h[1].mean(axis=(1, 2)), rtol=1e-6)


def test_frozen_blocks_parameter_gradients_but_not_inputs(rng):
    lin = Linear(3, 2, rng)
    x = Tensor(rng.standard_normal((4, 3)).astype(np.float32), requires_grad=True)
    with frozen(lin):
        T.tsum(lin(x)).backward()
    assert lin.weight.grad is None and x.grad is not None
    assert lin.weight.requires_grad


def test_state_dict_round_trip(rng):
    a = Conv2d(2, 3, 3, rng, spectral=True)
    b = Conv2d(2, 3, 3, np.random.default_rng(99), spectral=True)
    b.load_state_dict(a.state_dict())
    for k, val in a.state_dict().items():
        np.testing.assert_array_equal(b.state_dict()[k], val)
    bad = dict(a.state_dict())
    bad["weight"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(ValueError, match="shape mismatch"):
        b.load_state_dict(bad)


def test_adam_first_step_moves_by_lr(rng):
    lin = Linear(2, 1, rng)
    store = ParameterStore.from_modules(lin=lin)
    before = lin.weight.data.copy()
    T.tsum(lin(Tensor(np.ones((1, 2), np.float32)))).backward()
    adam_step(store, lr=0.01)
    np.testing.assert_allclose(np.abs(lin.weight.data - before), 0.01, rtol=1e-3)
