"""Phase-aware token mixing and the wave-modulated generator block."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import ChannelLinear, ConditionalBatchNorm2d, Linear, Module, Parameter, init_normal
from .tensor import Tensor

AXES = ("height", "width")


def estimate_phase(f: Tensor, phase_proj: ChannelLinear) -> Tensor:
    """Per-token phase: a learned channel-wise affine map of the features (1x1 conv)."""
    return phase_proj(f)


class PATM(Module):
    """Phase-aware token mixing along one spatial axis.

    Output token j is sum_k Wt[j,k] f_k cos(theta_k) + Wi[j,k] f_k sin(theta_k),
    with every other axis treated as batch. Weights are sized for
    ``max_tokens`` and sliced for shorter sequences.
    """

    def __init__(self, channels: int, max_tokens: int, axis: str, rng: np.random.Generator):
        super().__init__()
        if axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
        self.axis = axis
        self.max_tokens = max_tokens
        eye = np.eye(max_tokens)
        self.w_t = Parameter(eye + init_normal(rng, (max_tokens, max_tokens), 0.02))
        self.w_i = Parameter(init_normal(rng, (max_tokens, max_tokens), 0.02))
        self.phase_proj = ChannelLinear(channels, channels, rng)

    def forward(self, f: Tensor, theta: Tensor | None = None) -> Tensor:
        if theta is None:
            theta = estimate_phase(f, self.phase_proj)
        return patm_forward(f, self, theta)


def patm_forward(f: Tensor, params: PATM, theta: Tensor) -> Tensor:
    ax = 2 if params.axis == "height" else 3
    n = f.shape[ax]
    if n > params.max_tokens:
        raise ValueError(f"PATM along {params.axis}: {n} tokens exceed the weight extent {params.max_tokens}")
    if theta.shape != f.shape:
        raise ValueError(f"phase shape {theta.shape} does not match token layout {f.shape}")
    wt = params.w_t if n == params.max_tokens else params.w_t[:n, :n]
    wi = params.w_i if n == params.max_tokens else params.w_i[:n, :n]
    real = f * T.cos(theta)
    imag = f * T.sin(theta)
    if ax == 2:
        return wt @ real + wi @ imag
    return real @ T.transpose(wt, (1, 0)) + imag @ T.transpose(wi, (1, 0))


class TokenMixing(Module):
    """Height PATM, width PATM and a channel FC fused by a per-channel softmax gate.

    Gate logits come from a two-layer MLP on globally average-pooled features.
    """

    def __init__(self, channels: int, max_h: int, max_w: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.patm_h = PATM(channels, max_h, "height", rng)
        self.patm_w = PATM(channels, max_w, "width", rng)
        self.channel_fc = ChannelLinear(channels, channels, rng)
        hidden = max(channels // 4, 4)
        self.gate_fc1 = Linear(channels, hidden, rng)
        self.gate_fc2 = Linear(hidden, 3 * channels, rng, std=0.02)

    def branches(self, f: Tensor) -> tuple:
        return self.patm_h(f), self.patm_w(f), self.channel_fc(f)

    def gates(self, f: Tensor) -> Tensor:
        B, C = f.shape[:2]
        pooled = T.mean(f, axis=(2, 3))
        logits = self.gate_fc2(T.relu(self.gate_fc1(pooled)))
        return T.softmax(T.reshape(logits, (B, 3, C)), axis=1)

    def forward(self, f: Tensor) -> Tensor:
        B, C = f.shape[:2]
        g = self.gates(f)
        out = None
        for i, branch in enumerate(self.branches(f)):
            term = branch * T.reshape(g[:, i], (B, C, 1, 1))
            out = term if out is None else out + term
        return out


def token_mix(f: Tensor, block: "WaveGBlock") -> Tensor:
    return block.token_mix(f)


class ChannelMLP(Module):
    """Per-token FC -> activation -> FC over channels."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, ratio: int = 2, activation=T.relu):
        super().__init__()
        self.fc1 = ChannelLinear(in_ch, ratio * in_ch, rng, std=np.sqrt(2.0 / in_ch))
        self.fc2 = ChannelLinear(ratio * in_ch, out_ch, rng)
        self.activation = activation

    def forward(self, f: Tensor) -> Tensor:
        return self.fc2(self.activation(self.fc1(f)))


def channel_mlp(f: Tensor, mlp: ChannelMLP) -> Tensor:
    return mlp(f)


class WaveGBlock(Module):
    """CBN -> ReLU -> 2x nearest upsample -> token mixing -> CBN -> ReLU -> channel MLP, plus residual.

    ``max_h`` / ``max_w`` are the token extents after upsampling at the
    longest supported text.
    """

    def __init__(self, in_ch: int, out_ch: int, style_dim: int, max_h: int, max_w: int,
                 rng: np.random.Generator, upsample: bool = True, mlp_ratio: int = 2):
        super().__init__()
        self.in_ch, self.out_ch, self.upsample = in_ch, out_ch, upsample
        self.cbn1 = ConditionalBatchNorm2d(in_ch, style_dim, rng)
        self.token_mix = TokenMixing(in_ch, max_h, max_w, rng)
        self.cbn2 = ConditionalBatchNorm2d(in_ch, style_dim, rng)
        self.mlp = ChannelMLP(in_ch, out_ch, rng, ratio=mlp_ratio)
        self.shortcut = ChannelLinear(in_ch, out_ch, rng, bias=False) if in_ch != out_ch else None

    def residual(self, f: Tensor) -> Tensor:
        r = T.upsample_nearest2d(f, 2) if self.upsample else f
        return self.shortcut(r) if self.shortcut is not None else r

    def forward(self, f: Tensor, style: Tensor) -> Tensor:
        if f.shape[1] != self.in_ch:
            raise ValueError(f"WaveGBlock expects {self.in_ch} channels, got {f.shape[1]}")
        h = T.relu(self.cbn1(f, style))
        if self.upsample:
            h = T.upsample_nearest2d(h, 2)
        h = self.token_mix(h)
        h = T.relu(self.cbn2(h, style))
        h = self.mlp(h)
        return h + self.residual(f)


def wavegblock_forward(f: Tensor, style_segment: Tensor, block: WaveGBlock) -> Tensor:
    return block(f, style_segment)
