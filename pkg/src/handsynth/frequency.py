"""Haar wavelet sub-bands, DFT amplitude/phase sets, sliced Wasserstein distance
and the frequency distribution loss built from them.

All functions are pure in their inputs plus an explicit seed.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

H_LOW = np.array([1.0, 1.0]) / np.sqrt(2.0)
H_HIGH = np.array([1.0, -1.0]) / np.sqrt(2.0)
SUBBAND_NAMES = ("ll", "lh", "hl", "hh")
PHASE_EPS = 1e-8
DEFAULT_PROJECTIONS = 64


@dataclass
class WaveletSubbands:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    def __post_init__(self):
        shapes = {b.shape for b in (self.ll, self.lh, self.hl, self.hh)}
        if len(shapes) != 1:
            raise ValueError(f"sub-bands must share one shape, got {sorted(shapes)}")

    def bands(self) -> tuple:
        return self.ll, self.lh, self.hl, self.hh


@dataclass
class FreqStats:
    """Per-image sets of spectral feature vectors, shape (B, N_bins, C) each."""

    amplitudes: Tensor
    phases: Tensor


def haar_kernels() -> Tensor:
    """The four fixed 2x2 analysis kernels, ordered LL, LH, HL, HH, shape (4, 1, 2, 2).

    Kernel XY is the outer product h_X^T (rows) x h_Y (columns). The returned
    tensor never requires grad.
    """
    pairs = ((H_LOW, H_LOW), (H_LOW, H_HIGH), (H_HIGH, H_LOW), (H_HIGH, H_HIGH))
    k = np.stack([np.outer(a, b) for a, b in pairs])[:, None]
    return Tensor(k)


def _pad_even(x: Tensor) -> Tensor:
    # edge replication of the last row / column
    if x.shape[2] % 2:
        x = T.concat([x, x[:, :, -1:, :]], axis=2)
    if x.shape[3] % 2:
        x = T.concat([x, x[:, :, :, -1:]], axis=3)
    return x


def haar_dwt2(x: Tensor) -> WaveletSubbands:
    """Single-level orthonormal 2-D Haar transform as a stride-2 grouped convolution.

    Odd spatial extents are first padded to even by edge replication.
    """
    x = _pad_even(T.as_tensor(x))
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise RuntimeError(f"internal error: odd extents {(H, W)} after padding")
    k = haar_kernels().data.astype(x.dtype)
    weight = Tensor(np.tile(k, (C, 1, 1, 1)))  # (4C, 1, 2, 2), group c -> channels 4c..4c+3
    out = T.conv2d(x, weight, stride=2, groups=C)
    out = T.reshape(out, (B, C, 4, H // 2, W // 2))
    return WaveletSubbands(*(out[:, :, i] for i in range(4)))


def haar_idwt2(s: WaveletSubbands) -> Tensor:
    """Inverse transform: transposed stride-2 convolution with the same kernels.

    Stride equals kernel size, so each coefficient quadruple scatters into one
    disjoint 2x2 output block.
    """
    B, C, h, w = s.ll.shape
    k = haar_kernels().data.astype(s.ll.dtype).reshape(4, 4)  # row: band, col: 2*a + b
    coeffs = T.stack(list(s.bands()), axis=-1)  # (B, C, h, w, 4)
    blocks = coeffs @ Tensor(k)  # (B, C, h, w, 4)
    blocks = T.reshape(blocks, (B, C, h, w, 2, 2))
    return T.reshape(T.transpose(blocks, (0, 1, 2, 4, 3, 5)), (B, C, 2 * h, 2 * w))


def hf_aggregate(s: WaveletSubbands) -> Tensor:
    """Sum of the three detail bands, LH + HL + HH."""
    return s.lh + s.hl + s.hh


def high_frequency(x: Tensor) -> Tensor:
    return hf_aggregate(haar_dwt2(x))


@lru_cache(maxsize=32)
def _dft_mats(n: int, dtype_name: str):
    k = np.arange(n)
    ang = 2.0 * np.pi * np.outer(k, k) / n
    c, s = np.cos(ang), np.sin(ang)
    # exact zeros keep DC / Nyquist imaginary parts at 0 so their phase is stable
    c[np.abs(c) < 1e-12] = 0.0
    s[np.abs(s) < 1e-12] = 0.0
    return c.astype(dtype_name), s.astype(dtype_name)


def dft2(f: Tensor) -> tuple:
    """Unnormalized 2-D DFT over the last two axes of a real tensor, as (real, imag)."""
    f = T.as_tensor(f)
    H, W = f.shape[-2:]
    dt = f.dtype.name
    ch, sh = (Tensor(a) for a in _dft_mats(H, dt))
    cw, sw = (Tensor(a) for a in _dft_mats(W, dt))
    # X = (C_H - i S_H) f (C_W - i S_W)
    a = ch @ f
    b = sh @ f
    re = a @ cw - b @ sw
    im = T.neg(a @ sw + b @ cw)
    return re, im


def dft2_amp_phase(f: Tensor) -> FreqStats:
    """Amplitude and phase sets of every spatial frequency bin.

    Each bin contributes one C-dimensional vector; phases lie in (-pi, pi] and
    are 0 where the amplitude is below 1e-8.
    """
    f = T.as_tensor(f)
    B, C, H, W = f.shape
    re, im = dft2(f)
    amp = T.complex_abs(re, im, PHASE_EPS)
    phase = T.complex_angle(re, im, PHASE_EPS)

    def as_set(t):
        return T.transpose(T.reshape(t, (B, C, H * W)), (0, 2, 1))

    return FreqStats(as_set(amp), as_set(phase))


def projection_directions(dim: int, n_proj: int, seed: int, dtype=None) -> np.ndarray:
    """``n_proj`` random unit vectors in R^dim as columns, fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((dim, n_proj))
    d /= np.linalg.norm(d, axis=0, keepdims=True)
    return d.astype(dtype or T.get_default_dtype())


def sliced_wasserstein(p, q, n_proj: int = DEFAULT_PROJECTIONS, seed: int = 0) -> Tensor:
    """Mean 1-D 1-Wasserstein distance over random projections.

    ``p`` and ``q`` are point sets of shape (N, D), or batches (B, N, D) that
    are averaged. Both sets must have the same cardinality; each projected
    pair is matched in sorted order.
    """
    p, q = T.as_tensor(p), T.as_tensor(q)
    if p.ndim < 2 or q.ndim < 2:
        raise ValueError(f"point sets need shape (N, D), got {p.shape} and {q.shape}")
    if p.shape[-2] == 0 or q.shape[-2] == 0:
        raise ValueError("sliced_wasserstein: empty point set")
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"sliced_wasserstein: dimension mismatch {p.shape[-1]} vs {q.shape[-1]}")
    if p.shape != q.shape:
        raise ValueError(f"sliced_wasserstein: sets must have equal cardinality, got {p.shape} and {q.shape}")
    if n_proj < 1:
        raise ValueError("n_proj must be >= 1")
    dirs = Tensor(projection_directions(p.shape[-1], n_proj, seed, p.dtype))
    sp = T.sort(p @ dirs, axis=-2)
    sq = T.sort(q @ dirs, axis=-2)
    return T.mean(T.tabs(sp - sq))


def fdl_loss(feat_real: Tensor, feat_fake: Tensor, lambda_phase: float = 1.0,
             n_proj: int = DEFAULT_PROJECTIONS, seed: int = 0) -> Tensor:
    """Frequency distribution loss between two feature maps (B, C, H, W).

    Amplitude SWD plus ``lambda_phase`` times phase SWD, one set per image,
    averaged over the batch. The real branch is detached.
    """
    feat_real, feat_fake = T.as_tensor(feat_real), T.as_tensor(feat_fake)
    if feat_real.shape != feat_fake.shape:
        raise ValueError(f"fdl_loss: feature shapes differ, {feat_real.shape} vs {feat_fake.shape}")
    real = dft2_amp_phase(feat_real.detach())
    fake = dft2_amp_phase(feat_fake)
    loss = sliced_wasserstein(real.amplitudes, fake.amplitudes, n_proj, seed)
    if lambda_phase:
        loss = loss + lambda_phase * sliced_wasserstein(real.phases, fake.phases, n_proj, seed + 1)
    return loss
