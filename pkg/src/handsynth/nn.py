"""Parameter containers and the layers shared by every sub-network."""
from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

BN_MOMENTUM = 0.1
SIGMA_FLOOR = 1e-12


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal module tree: parameters, numpy buffers and a train/eval flag."""

    def __init__(self):
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_buffer_names", [])

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffer_names.append(name)
        setattr(self, name, np.asarray(value, dtype=T.get_default_dtype()))

    def _children(self) -> Iterator[tuple]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)
        for m_prefix, mod in self._prefixed_modules():
            for b in mod._buffer_names:
                setattr(mod, b, np.array(state[m_prefix + b], dtype=getattr(mod, b).dtype))

    def _prefixed_modules(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix, self
        for key, child in self._children():
            yield from child._prefixed_modules(f"{prefix}{key}.")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


@contextlib.contextmanager
def frozen(*modules: Module):
    """Build graphs through ``modules`` without tracking their parameters.

    Gradients still flow through the modules to their inputs.
    """
    saved = []
    for m in modules:
        for p in m.parameters():
            saved.append((p, p.requires_grad))
            p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


@contextlib.contextmanager
def evaluating(*modules: Module):
    """Temporarily switch modules to inference mode (running statistics)."""
    modes = [[(m, m.training) for m in mod.modules()] for mod in modules]
    for mod in modules:
        mod.eval()
    try:
        yield
    finally:
        for group in modes:
            for m, mode in group:
                object.__setattr__(m, "training", mode)


def init_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(T.get_default_dtype())


def kaiming_std(fan_in: int, gain: float = 2.0 ** 0.5) -> float:
    return gain / np.sqrt(fan_in)


# -- spectral normalization ----------------------------------------------------

class SpectralNorm(Module):
    """Persistent power-iteration state for one weight tensor."""

    def __init__(self, out_features: int, in_features: int, rng: np.random.Generator):
        super().__init__()
        u = rng.standard_normal(out_features)
        v = rng.standard_normal(in_features)
        self.register_buffer("u", u / np.linalg.norm(u))
        self.register_buffer("v", v / np.linalg.norm(v))

    def forward(self, weight: Tensor, n_iter: int = 1) -> Tensor:
        return spectral_normalize(weight, self, update=self.training, n_iter=n_iter)


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / max(float(np.linalg.norm(vec)), SIGMA_FLOOR)


def spectral_normalize(weight: Tensor, state: SpectralNorm, update: bool = True, n_iter: int = 1) -> Tensor:
    """Return ``weight / sigma`` with sigma the power-iteration estimate of its top singular value.

    ``state`` carries u and v across calls; each call advances ``n_iter``
    power steps when ``update`` is set. The estimate is treated as
    ``u^T W v`` with u, v constant, so the gradient includes the
    ``-u v^T`` correction through sigma. A zero matrix gives sigma = 1e-12.
    """
    wmat = weight.data.reshape(weight.shape[0], -1)
    u, v = state.u, state.v
    if update:
        for _ in range(n_iter):
            v = _unit(wmat.T @ u)
            u = _unit(wmat @ v)
        state.u, state.v = u.astype(state.u.dtype), v.astype(state.v.dtype)
    dt = weight.data.dtype
    ut = Tensor(u.reshape(1, -1).astype(dt))
    vt = Tensor(v.reshape(-1, 1).astype(dt))
    sigma = ut @ T.reshape(weight, wmat.shape) @ vt
    if abs(float(sigma.data[0, 0])) < SIGMA_FLOOR:
        sigma = Tensor(np.full((1, 1), SIGMA_FLOOR, dtype=dt))
    return weight / T.reshape(sigma, (1,) * weight.ndim)


# -- layers --------------------------------------------------------------------

class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, spectral: bool = False, std: float | None = None, bias_init: float = 0.0):
        super().__init__()
        std = kaiming_std(in_features, 1.0) if std is None else std
        self.weight = Parameter(init_normal(rng, (out_features, in_features), std))
        self.bias = Parameter(np.full(out_features, bias_init)) if bias else None
        self.sn = SpectralNorm(out_features, in_features, rng) if spectral else None

    def forward(self, x: Tensor) -> Tensor:
        w = self.sn(self.weight) if self.sn is not None else self.weight
        out = x @ T.transpose(w, (1, 0))
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, rng: np.random.Generator, stride=1, padding=0,
                 groups: int = 1, bias: bool = True, spectral: bool = False, gain: float = 2.0 ** 0.5):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        fan_in = in_ch // groups * kh * kw
        self.weight = Parameter(init_normal(rng, (out_ch, in_ch // groups, kh, kw), kaiming_std(fan_in, gain)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.sn = SpectralNorm(out_ch, fan_in, rng) if spectral else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        w = self.sn(self.weight) if self.sn is not None else self.weight
        return T.conv2d(x, w, self.bias, self.stride, self.padding, self.groups)


class ChannelLinear(Module):
    """1x1 convolution over NCHW maps written as a broadcast matmul."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        super().__init__()
        std = kaiming_std(in_ch, 1.0) if std is None else std
        self.weight = Parameter(init_normal(rng, (out_ch, in_ch), std))
        self.bias = Parameter(np.zeros((out_ch, 1))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        out = self.weight @ T.reshape(x, (B, C, H * W))
        if self.bias is not None:
            out = out + self.bias
        return T.reshape(out, (B, -1, H, W))


class BatchNorm2d(Module):
    def __init__(self, channels: int, affine: bool = True, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(channels)) if affine else None
        self.bias = Parameter(np.zeros(channels)) if affine else None
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def normalize(self, x: Tensor) -> Tensor:
        if self.training:
            xhat, mu, var = T.batch_norm_normalize(x, (0, 2, 3), self.eps)
            n = x.size // x.shape[1]
            unbiased = var.reshape(-1) * (n / max(n - 1, 1))
            m = BN_MOMENTUM
            self.running_mean = ((1 - m) * self.running_mean + m * mu.reshape(-1)).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
            return xhat
        C = x.shape[1]
        mu = self.running_mean.reshape(1, C, 1, 1)
        inv = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(1, C, 1, 1)
        return (x - mu.astype(x.dtype)) * inv.astype(x.dtype)

    def forward(self, x: Tensor) -> Tensor:
        xhat = self.normalize(x)
        if self.weight is None:
            return xhat
        C = x.shape[1]
        return xhat * T.reshape(self.weight, (1, C, 1, 1)) + T.reshape(self.bias, (1, C, 1, 1))


class ConditionalBatchNorm2d(Module):
    """Batch norm whose per-channel gain and bias are affine maps of a style segment."""

    def __init__(self, channels: int, style_dim: int, rng: np.random.Generator, eps: float = 1e-5):
        super().__init__()
        self.bn = BatchNorm2d(channels, affine=False, eps=eps)
        self.gain = Linear(style_dim, channels, rng, std=0.02, bias_init=1.0)
        self.shift = Linear(style_dim, channels, rng, std=0.02)

    def forward(self, x: Tensor, style: Tensor) -> Tensor:
        if self.training and x.shape[0] < 2:
            raise ValueError("conditional batch norm in training mode needs batch size >= 2 "
                             f"(got {x.shape[0]}); batch variance is undefined")
        B, C = x.shape[:2]
        gamma = T.reshape(self.gain(style), (B, C, 1, 1))
        beta = T.reshape(self.shift(style), (B, C, 1, 1))
        return self.bn.normalize(x) * gamma + beta


def conditional_batch_norm(x: Tensor, style_segment: Tensor, layer: ConditionalBatchNorm2d) -> Tensor:
    return layer(x, style_segment)


def masked_width_mean(h: Tensor, widths, full_width: int) -> Tensor:
    """Average an NCHW map over H and the valid prefix of W.

    ``widths`` are valid pixel widths on an input canvas of ``full_width``;
    they are mapped to feature columns by ceiling division.
    """
    B, C, H, W = h.shape
    if widths is None:
        return T.mean(h, axis=(2, 3))
    cols = np.ceil(np.asarray(widths, dtype=np.float64) * W / full_width).astype(int)
    cols = np.clip(cols, 1, W)
    mask = (np.arange(W)[None, :] < cols[:, None]).astype(h.dtype)
    summed = T.tsum(h * mask.reshape(B, 1, 1, W), axis=(2, 3))
    return summed * (1.0 / (H * cols.astype(h.dtype))).reshape(B, 1)
