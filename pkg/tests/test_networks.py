import numpy as np
import pytest

from handsynth import tensor as T
from handsynth.losses import ctc_loss
from handsynth.networks import (ArchConfig, StylePosterior, build_models, sample, sample_prior, split_style,
                                to_canvas)
from handsynth.nn import evaluating
from handsynth.optim import ParameterStore, adam_step
from handsynth.text import UnknownCharacterError, Vocab, decode_greedy, encode_text
from handsynth.tensor import Tensor


@pytest.fixture(scope="module")
def models():
    from conftest import TINY_ARCH
    return build_models(ArchConfig(**TINY_ARCH), seed=0)


def test_arch_defaults_and_segments():
    arch = ArchConfig()
    assert arch.segments == (32, 24, 24, 24, 24)
    assert sum(arch.segments) == arch.style_dim
    with pytest.raises(ValueError, match="split evenly"):
        ArchConfig(style_dim=101)
    assert ArchConfig.from_dict(arch.to_dict()) == arch


def test_split_style_rejects_wrong_length():
    with pytest.raises(ValueError, match="components"):
        split_style(Tensor(np.zeros((1, 10))), (4, 4))


@pytest.mark.parametrize("L", range(1, 9))
def test_generator_width_is_16_per_char(models, L):
    z = sample_prior(1, models.arch.style_dim, np.random.default_rng(L))
    with T.no_grad(), evaluating(models.G):
        img = models.G(encode_text("abcdefgh"[:L], models.arch.make_vocab()), z)
    assert img.shape == (1, 1, 32, 16 * L)
    assert np.abs(img.data).max() <= 1.0


def test_generator_deterministic_and_style_sensitive(models):
    vocab = models.arch.make_vocab()
    y = encode_text("word", vocab)
    z1, z2 = (sample_prior(1, models.arch.style_dim, np.random.default_rng(s)) for s in (1, 2))
    with T.no_grad(), evaluating(models.G):
        a, b, c = models.G(y, z1).data, models.G(y, z1).data, models.G(y, z2).data
    np.testing.assert_array_equal(a, b)
    assert np.abs(a - c).max() > 0.01


def test_generator_rejects_bad_inputs(models):
    vocab = models.arch.make_vocab()
    z = sample_prior(1, models.arch.style_dim, np.random.default_rng(0))
    with pytest.raises(UnknownCharacterError):
        models.G.generate(["ab1"], z)
    with pytest.raises(ValueError, match="max_len"):
        models.G.generate(["abcdefghi"], z)
    bad = encode_text("ab", vocab).matrix[None].copy()
    bad[0, 3, 0] = 1.0
    with pytest.raises(ValueError, match="one-hot"):
        models.G(bad, z)
    with pytest.raises(ValueError, match="style vector"):
        models.G.generate(["ab"], sample_prior(2, models.arch.style_dim, np.random.default_rng(0)))


def test_generate_pads_short_texts_with_background(models):
    z = sample_prior(2, models.arch.style_dim, np.random.default_rng(0))
    with T.no_grad(), evaluating(models.G):
        imgs, widths = models.G.generate(["ab", "abcd"], z)
    assert imgs.shape == (2, 1, 32, 64)
    np.testing.assert_array_equal(widths, [32, 64])
    np.testing.assert_array_equal(imgs.data[0, 0, :, 32:], 1.0)
    assert to_canvas(imgs, 128).shape == (2, 1, 32, 128)
    with pytest.raises(ValueError, match="exceeds"):
        to_canvas(imgs, 32)


def test_discriminators_shape_and_height_check(models, rng):
    x = Tensor(rng.uniform(-1, 1, (3, 1, 32, 64)).astype(np.float32))
    for d in (models.D, models.D_hf):
        with T.no_grad(), evaluating(d):
            out = d(x)
        assert out.shape == (3, 1) and np.isfinite(out.data).all()
        with pytest.raises(ValueError, match="expects"):
            d(Tensor(np.zeros((1, 1, 16, 64), np.float32)))


def test_masked_average_changes_padded_scores(models, rng):
    x = np.ones((2, 1, 32, 128), np.float32)
    x[:, :, :, :48] = rng.uniform(-1, 1, (2, 1, 32, 48))
    with T.no_grad(), evaluating(models.D):
        full = models.D(Tensor(x)).data
        masked = models.D(Tensor(x), np.array([48, 48])).data
    assert np.abs(full - masked).max() > 1e-6


def test_hf_discriminator_ignores_constant_offset(models, rng):
    x = rng.uniform(-1, 1, (2, 1, 32, 64))
    with T.default_dtype(np.float64), T.no_grad(), evaluating(models.D_hf):
        a = models.D_hf(Tensor(x)).data
        b = models.D_hf(Tensor(x + 0.37)).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_hf_discriminator_gradient_reaches_input(models, rng):
    x = Tensor(rng.uniform(-1, 1, (2, 1, 32, 32)).astype(np.float32), requires_grad=True)
    T.tsum(models.D_hf(x)).backward()
    assert np.abs(x.grad).sum() > 0


def test_recognizer_frames_and_normalization(models, rng):
    with T.no_grad(), evaluating(models.R):
        lp = models.R(Tensor(rng.uniform(-1, 1, (2, 1, 32, 128)).astype(np.float32))).data
    assert lp.shape == (32, 2, 27)
    np.testing.assert_allclose(np.exp(lp).sum(-1), 1.0, atol=1e-5)


def test_recognizer_overfits_one_sample(tiny_arch, small_dataset):
    from handsynth.toygen import collate
    R = build_models(tiny_arch, seed=1).R
    batch = collate(small_dataset.train().samples[:1])
    vocab = Vocab()
    targets = [vocab.encode(t) for t in batch.texts]
    store = ParameterStore.from_modules(R=R)
    x = Tensor(batch.images)
    for _ in range(200):
        store.zero_grad()
        ctc_loss(R(x), targets, [len(t) for t in targets]).backward()
        adam_step(store, lr=3e-3, beta1=0.9)
    with T.no_grad(), evaluating(R):
        assert decode_greedy(R(x), vocab) == batch.texts


def test_backbone_shapes_and_shared_heads(models, rng):
    S = models.S
    x = Tensor(rng.uniform(-1, 1, (2, 1, 32, 128)).astype(np.float32))
    with T.no_grad(), evaluating(S):
        assert S.backbone(x).shape[2:] == (1, 16)
        assert S.features(x).shape == (2, models.arch.backbone_channels[2], 4, 32)
        post = S.encode(x)
        logits = S.classify(x)
        assert logits.shape == (2, models.arch.num_writers)
        np.testing.assert_array_equal(S.encode(x).mu.data, post.mu.data)
        w = S.backbone.stages[0].conv1.weight
        saved = w.data.copy()
        w.data = saved * 1.5
        try:
            assert np.abs(S.encode(x).mu.data - post.mu.data).max() > 0
            assert np.abs(S.classify(x).data - logits.data).max() > 0
        finally:
            w.data = saved


def test_logvar_is_clamped(models, rng):
    head = models.S.encoder.logvar
    saved = head.bias.data.copy()
    head.bias.data = saved + 50.0
    try:
        with T.no_grad(), evaluating(models.S):
            post = models.S.encode(Tensor(rng.uniform(-1, 1, (1, 1, 32, 64)).astype(np.float32)))
        assert post.logvar.data.max() <= 10.0
    finally:
        head.bias.data = saved


def test_sample_uses_mean_without_rng():
    post = StylePosterior(Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 4))))
    assert sample(post) is post.mu
    draw = sample(post, np.random.default_rng(0)).data
    assert not np.allclose(draw, 1.0)
