"""Generator, spatial and high-frequency discriminators, recognizer, and the
shared-backbone style encoder / writer identifier."""
from __future__ import annotations

import string
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .frequency import high_frequency
from .nn import (BatchNorm2d, Conv2d, Linear, Module, Parameter, init_normal, masked_width_mean)
from .tensor import Tensor
from .text import OneHotText, Vocab, batch_indices
from .wavemlp import WaveGBlock

LOGVAR_CLAMP = 10.0
BACKGROUND = 1.0


@dataclass
class ArchConfig:
    """Architecture hyperparameters; serialized into checkpoint headers."""

    vocab: str = string.ascii_lowercase
    style_dim: int = 128
    content_dim: int = 32
    gen_channels: tuple = (128, 64, 32, 16)
    init_height: int = 2
    max_len: int = 8
    px_per_char: int = 16
    img_height: int = 32
    canvas_width: int = 128
    mlp_ratio: int = 2
    disc_channels: tuple = (32, 64, 128, 128)
    rec_channels: tuple = (64, 128, 128, 128)
    backbone_channels: tuple = (16, 32, 64, 128)
    num_writers: int = 32

    def __post_init__(self):
        self.gen_channels = tuple(self.gen_channels)
        self.disc_channels = tuple(self.disc_channels)
        self.rec_channels = tuple(self.rec_channels)
        self.backbone_channels = tuple(self.backbone_channels)
        n_blocks = len(self.gen_channels)
        if (self.style_dim - self.content_dim) % n_blocks:
            raise ValueError(f"style_dim - content_dim = {self.style_dim - self.content_dim} "
                             f"does not split evenly over {n_blocks} blocks")
        if self.init_height * 2 ** n_blocks != self.img_height:
            raise ValueError(f"{n_blocks} upsampling blocks from height {self.init_height} "
                             f"give {self.init_height * 2 ** n_blocks}, expected {self.img_height}")
        if self.px_per_char != 2 ** n_blocks:
            raise ValueError("px_per_char must equal the total upsampling factor")

    @property
    def segment_dim(self) -> int:
        return (self.style_dim - self.content_dim) // len(self.gen_channels)

    @property
    def segments(self) -> tuple:
        return (self.content_dim,) + (self.segment_dim,) * len(self.gen_channels)

    def make_vocab(self) -> Vocab:
        return Vocab(tuple(self.vocab))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


# -- style vectors -------------------------------------------------------------

@dataclass
class StylePosterior:
    mu: Tensor
    logvar: Tensor


def split_style(z: Tensor, segments) -> list:
    if z.shape[-1] != sum(segments):
        raise ValueError(f"style vector has {z.shape[-1]} components, segments need {sum(segments)}")
    out, start = [], 0
    for s in segments:
        out.append(z[:, start:start + s])
        start += s
    return out


def sample_prior(batch: int, dim: int, rng: np.random.Generator) -> Tensor:
    return Tensor(rng.standard_normal((batch, dim)))


def sample(posterior: StylePosterior, rng: np.random.Generator | None = None) -> Tensor:
    """Reparameterized draw mu + sigma * eps; without an rng the mean is returned."""
    if rng is None:
        return posterior.mu
    eps = Tensor(rng.standard_normal(posterior.mu.shape))
    return posterior.mu + T.exp(posterior.logvar * 0.5) * eps


# -- generator -----------------------------------------------------------------

class Generator(Module):
    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        super().__init__()
        self.arch = arch
        n, E = len(arch.vocab), arch.content_dim
        chans = (arch.gen_channels[0],) + arch.gen_channels
        self.embed = Parameter(init_normal(rng, (n, E), 1.0))
        self.proj = Linear(E, chans[0] * arch.init_height, rng)
        self.blocks = []
        for i in range(len(arch.gen_channels)):
            scale = 2 ** (i + 1)
            self.blocks.append(WaveGBlock(chans[i], chans[i + 1], arch.segment_dim,
                                          max_h=arch.init_height * scale, max_w=arch.max_len * scale,
                                          rng=rng, mlp_ratio=arch.mlp_ratio))
        self.out_bn = BatchNorm2d(chans[-1])
        self.out_conv = Conv2d(chans[-1], 1, 3, rng, padding=1, gain=1.0)

    def _check_onehot(self, y: np.ndarray, lengths) -> None:
        sums = y.sum(axis=1)  # (B, L)
        cols = np.arange(y.shape[2])[None, :]
        valid = cols < np.asarray(lengths)[:, None]
        if not (np.all(sums[valid] == 1) and np.all(sums[~valid] == 0)) or not np.isin(y, (0, 1)).all():
            raise ValueError("malformed one-hot text: every character column must contain exactly one 1")

    def forward(self, y, z: Tensor, lengths=None) -> Tensor:
        """Render one-hot text ``y`` (B, n, L) in style ``z`` (B, d) to images (B, 1, 32, 16 L).

        Columns past ``lengths[b]`` must be all-zero padding; pixels beyond
        16 * lengths[b] are set to background.
        """
        arch = self.arch
        y = np.asarray(y.matrix[None] if isinstance(y, OneHotText) else y)
        B, n, L = y.shape
        if n != len(arch.vocab):
            raise ValueError(f"one-hot text has {n} rows, vocabulary has {len(arch.vocab)}")
        if L > arch.max_len:
            raise ValueError(f"text length {L} exceeds max_len {arch.max_len}")
        full = lengths is None
        lengths = np.full(B, L) if full else np.asarray(lengths)
        self._check_onehot(y, lengths)
        z = T.as_tensor(z)
        if z.shape != (B, arch.style_dim):
            raise ValueError(f"style vector shape {z.shape}, expected {(B, arch.style_dim)}")
        segs = split_style(z, arch.segments)
        onehot = Tensor(np.transpose(y, (0, 2, 1)))
        content = (onehot @ self.embed) * T.reshape(segs[0], (B, 1, arch.content_dim))
        f = T.reshape(self.proj(content), (B, L, -1, arch.init_height))
        f = T.transpose(f, (0, 2, 3, 1))  # (B, C0, H0, L)
        for block, seg in zip(self.blocks, segs[1:]):
            f = block(f, seg)
        img = T.tanh(self.out_conv(T.relu(self.out_bn(f))))
        if not full and np.any(lengths < L):
            keep = (np.arange(img.shape[3])[None, :] < (lengths * arch.px_per_char)[:, None])
            keep = keep.astype(img.dtype).reshape(B, 1, 1, -1)
            img = img * keep + (1.0 - keep) * BACKGROUND
        return img

    def generate(self, texts, z: Tensor, vocab: Vocab | None = None) -> tuple:
        """Batch of strings -> (images at width 16 * longest, valid pixel widths)."""
        vocab = vocab or self.arch.make_vocab()
        idx = batch_indices(texts, vocab)
        B, L = idx.shape
        y = np.zeros((B, vocab.size, L), dtype=np.float32)
        b, l = np.nonzero(idx >= 0)
        y[b, idx[b, l], l] = 1.0
        lengths = np.array([len(t) for t in texts])
        return self.forward(y, z, lengths), lengths * self.arch.px_per_char


def generator_forward(y: OneHotText, z: Tensor, generator: Generator) -> Tensor:
    return generator(y, z)


def to_canvas(images: Tensor, width: int) -> Tensor:
    """Right-pad (B, 1, H, W) images with background to ``width`` columns."""
    W = images.shape[3]
    if W == width:
        return images
    if W > width:
        raise ValueError(f"image width {W} exceeds canvas width {width}")
    return T.pad(images, ((0, 0), (0, 0), (0, 0), (0, width - W)), value=BACKGROUND)


# -- discriminators -------------------------------------------------------------

class ConvBody(Module):
    """Stride-2 conv blocks (spectral norm, batch norm, ReLU), masked global average, linear."""

    def __init__(self, channels, rng: np.random.Generator, in_ch: int = 1):
        super().__init__()
        self.convs, self.norms = [], []
        prev = in_ch
        for c in channels:
            self.convs.append(Conv2d(prev, c, 3, rng, stride=2, padding=1, spectral=True))
            self.norms.append(BatchNorm2d(c))
            prev = c
        self.head = Linear(prev, 1, rng, spectral=True)

    def forward(self, x: Tensor, widths=None) -> Tensor:
        h = x
        for conv, bn in zip(self.convs, self.norms):
            h = T.relu(bn(conv(h)))
        return self.head(masked_width_mean(h, widths, x.shape[3]))


class Discriminator(Module):
    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        super().__init__()
        self.height = arch.img_height
        self.body = ConvBody(arch.disc_channels, rng)

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.height:
            raise ValueError(f"discriminator expects (B, 1, {self.height}, W) images, got {x.shape}")

    def forward(self, x: Tensor, widths=None) -> Tensor:
        """Unbounded realism score (B, 1); averages only over the valid width when given."""
        x = T.as_tensor(x)
        self._check(x)
        return self.body(x, widths)


class HFDiscriminator(Discriminator):
    """Same conv topology applied to LH + HL + HH of a one-level Haar transform."""

    def forward(self, x: Tensor, widths=None) -> Tensor:
        x = T.as_tensor(x)
        self._check(x)
        hf = high_frequency(x)
        half = None if widths is None else (np.asarray(widths) + 1) // 2
        return self.body(hf, half)


def discriminator_forward(x: Tensor, d: Discriminator, widths=None) -> Tensor:
    return d(x, widths)


def hf_discriminator_forward(x: Tensor, d_hf: HFDiscriminator, widths=None) -> Tensor:
    return d_hf(x, widths)


# -- recognizer ------------------------------------------------------------------

class Recognizer(Module):
    """Convolutional column encoder: height 32 -> 1, width W -> W / 4 frames."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        super().__init__()
        c = arch.rec_channels
        strides = ((2, 2), (2, 2), (2, 1), (2, 1))
        self.convs, self.norms = [], []
        prev = 1
        for ch, s in zip(c, strides):
            self.convs.append(Conv2d(prev, ch, 3, rng, stride=s, padding=1, bias=False))
            self.norms.append(BatchNorm2d(ch))
            prev = ch
        self.collapse = Conv2d(prev, prev, (2, 3), rng, padding=(0, 1), bias=False)
        self.collapse_bn = BatchNorm2d(prev)
        self.classifier = Conv2d(prev, len(arch.vocab) + 1, 1, rng, gain=1.0)

    def forward(self, x: Tensor) -> Tensor:
        """Per-frame log-probabilities (T, B, n + 1); the blank is the last class."""
        h = T.as_tensor(x)
        for conv, bn in zip(self.convs, self.norms):
            h = T.relu(bn(conv(h)))
        h = T.relu(self.collapse_bn(self.collapse(h)))
        logits = self.classifier(h)  # (B, n+1, 1, T)
        logits = T.transpose(T.reshape(logits, logits.shape[:2] + (logits.shape[3],)), (2, 0, 1))
        return T.log_softmax(logits, axis=-1)


def recognizer_forward(x: Tensor, r: Recognizer) -> Tensor:
    return r(x)


# -- style encoder / writer identifier -------------------------------------------

class ResidualStage(Module):
    def __init__(self, in_ch: int, out_ch: int, stride, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1, bias=False)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, padding=1, bias=False)
        self.bn2 = BatchNorm2d(out_ch)
        self.skip = Conv2d(in_ch, out_ch, 1, rng, stride=stride, bias=False, gain=1.0)
        self.skip_bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return T.relu(h + self.skip_bn(self.skip(x)))


class SharedBackbone(Module):
    """Residual stages (B, 1, 32, W) -> (B, C, 1, W / 8); stage 3 output is the FDL feature tap."""

    STRIDES = ((2, 2), (2, 2), (2, 1), (2, 2))
    TAP = 3

    def __init__(self, channels, rng: np.random.Generator):
        super().__init__()
        self.stages = []
        prev = 1
        for c, s in zip(channels, self.STRIDES):
            self.stages.append(ResidualStage(prev, c, s, rng))
            prev = c
        self.out_channels = prev

    def forward(self, x: Tensor, tap: bool = False):
        h = T.as_tensor(x)
        feat = None
        for i, stage in enumerate(self.stages, start=1):
            h = stage(h)
            if i == self.TAP:
                feat = h
        out = T.mean(h, axis=2, keepdims=True)
        return (out, feat) if tap else out

    def features(self, x: Tensor) -> Tensor:
        """The FDL tap: output of the third stage, (B, C3, 4, W / 4)."""
        h = T.as_tensor(x)
        for stage in self.stages[:self.TAP]:
            h = stage(h)
        return h


class SequenceHead(Module):
    """1x3 conv along the horizontal sequence, then masked average pooling."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(channels, channels, (1, 3), rng, padding=(0, 1))

    def forward(self, h: Tensor, widths, full_width: int) -> Tensor:
        return masked_width_mean(T.relu(self.conv(h)), widths, full_width)


class StyleEncoder(Module):
    def __init__(self, channels: int, style_dim: int, rng: np.random.Generator):
        super().__init__()
        self.seq = SequenceHead(channels, rng)
        self.mu = Linear(channels, style_dim, rng)
        self.logvar = Linear(channels, style_dim, rng, std=0.01)

    def forward(self, h: Tensor, widths, full_width: int) -> StylePosterior:
        pooled = self.seq(h, widths, full_width)
        return StylePosterior(self.mu(pooled), T.clamp(self.logvar(pooled), -LOGVAR_CLAMP, LOGVAR_CLAMP))


class WriterIdentifier(Module):
    def __init__(self, channels: int, num_writers: int, rng: np.random.Generator):
        super().__init__()
        self.seq = SequenceHead(channels, rng)
        self.fc = Linear(channels, num_writers, rng)

    def forward(self, h: Tensor, widths, full_width: int) -> Tensor:
        return self.fc(self.seq(h, widths, full_width))


class StyleNet(Module):
    """Shared backbone with the variational style head (E) and writer head (W)."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        super().__init__()
        self.backbone = SharedBackbone(arch.backbone_channels, rng)
        c = self.backbone.out_channels
        self.encoder = StyleEncoder(c, arch.style_dim, rng)
        self.writer = WriterIdentifier(c, arch.num_writers, rng)

    def encode(self, x: Tensor, widths=None) -> StylePosterior:
        x = T.as_tensor(x)
        return self.encoder(self.backbone(x), widths, x.shape[3])

    def classify(self, x: Tensor, widths=None) -> Tensor:
        x = T.as_tensor(x)
        return self.writer(self.backbone(x), widths, x.shape[3])

    def features(self, x: Tensor) -> Tensor:
        return self.backbone.features(x)

    def pooled_features(self, x: Tensor, widths=None) -> Tensor:
        """Backbone output mean-pooled over the valid width: the Frechet feature net."""
        x = T.as_tensor(x)
        return masked_width_mean(self.backbone(x), widths, x.shape[3])

    def encoder_parameters(self) -> dict:
        named = dict(self.backbone.named_parameters("backbone."))
        named.update(self.encoder.named_parameters("encoder."))
        return named


def style_encode(x: Tensor, net: StyleNet, widths=None) -> StylePosterior:
    return net.encode(x, widths)


def writer_classify(x: Tensor, net: StyleNet, widths=None) -> Tensor:
    return net.classify(x, widths)


def shared_backbone(x: Tensor, net: StyleNet) -> Tensor:
    return net.backbone(x)


@dataclass
class Models:
    arch: ArchConfig
    G: Generator
    D: Discriminator
    D_hf: HFDiscriminator
    R: Recognizer
    S: StyleNet
    extra: dict = field(default_factory=dict)

    def named(self) -> dict:
        return {"G": self.G, "D": self.D, "D_hf": self.D_hf, "R": self.R, "S": self.S}

    def train(self, mode: bool = True) -> None:
        for m in self.named().values():
            m.train(mode)

    def eval(self) -> None:
        self.train(False)


def build_models(arch: ArchConfig, seed: int) -> Models:
    """Construct all sub-networks from one seed (independent streams per network)."""
    streams = np.random.SeedSequence([seed, 0xA5C1]).spawn(5)
    rngs = [np.random.default_rng(s) for s in streams]
    return Models(arch,
                  G=Generator(arch, rngs[0]),
                  D=Discriminator(arch, rngs[1]),
                  D_hf=HFDiscriminator(arch, rngs[2]),
                  R=Recognizer(arch, rngs[3]),
                  S=StyleNet(arch, rngs[4]))
