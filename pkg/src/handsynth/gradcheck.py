"""Central finite-difference checks for every differentiable operation.

Each case builds a scalar function of some leaf tensors (inputs and/or
module parameters). The analytic gradient from ``backward`` is compared with
(f(x + eps e_i) - f(x - eps e_i)) / (2 eps) in float64. The reported error
for a leaf is max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|).
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .frequency import (WaveletSubbands, dft2, dft2_amp_phase, fdl_loss, haar_dwt2, haar_idwt2,
                        high_frequency, sliced_wasserstein)
from .losses import ctc_loss, hinge_d, hinge_g, kl_gauss, style_recon_l1, writer_ce
from .networks import StylePosterior
from .nn import BatchNorm2d, ConditionalBatchNorm2d, Conv2d, Linear, SpectralNorm, masked_width_mean, \
    spectral_normalize
from .tensor import Tensor
from .wavemlp import PATM, ChannelMLP, TokenMixing, WaveGBlock

SINGLE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
EPS = 1e-6
MAX_ENTRIES = 24


@dataclass
class Case:
    name: str
    group: str
    build: Callable  # rng -> (fn() -> scalar Tensor, [leaf Tensors])
    tol: float = SINGLE_TOL


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    worst_seed: int
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away(rng, shape, lo=0.2, hi=1.5):
    """Random values bounded away from zero (keeps kinks out of the difference stencil)."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _proj(out: Tensor, rng) -> Callable:
    """Reduce a tensor output to a scalar with a fixed random weighting."""
    w = Tensor(rng.standard_normal(out.shape))
    return w


def _scalarize(f: Callable, rng) -> Callable:
    cache = {}

    def g():
        out = f()
        if out.size == 1:
            return T.reshape(out, ())
        if "w" not in cache:
            cache["w"] = _proj(out, rng)
        return T.tsum(out * cache["w"])

    return g


def _module_leaves(rng, *mods) -> list:
    """Parameters of ``mods``, jittered so zero-initialized biases do not sit exactly on a ReLU kink."""
    leaves = []
    for m in mods:
        leaves += m.parameters()
    for p in leaves:
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    return leaves


# -- case builders ------------------------------------------------------------------

def _unary(op, lo=0.2, hi=1.5, positive=False):
    def build(rng):
        x = _leaf(rng.uniform(lo, hi, (3, 4)) if positive else _away(rng, (3, 4), lo, hi))
        return _scalarize(lambda: op(x), rng), [x]
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = _leaf(rng.standard_normal((3, 4)))
        b = _leaf(rng.uniform(0.5, 2.0, (4,)) * (1 if positive_b else rng.choice([-1, 1], 4)))
        return _scalarize(lambda: op(a, b), rng), [a, b]
    return build


def _b_matmul(rng):
    a, b = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((4, 2)))
    return _scalarize(lambda: a @ b, rng), [a, b]


def _b_matmul_batched(rng):
    a, b = _leaf(rng.standard_normal((2, 3, 4, 5))), _leaf(rng.standard_normal((5, 3)))
    c = _leaf(rng.standard_normal((4, 4)))
    return _scalarize(lambda: c @ (a @ b), rng), [a, b, c]


def _b_reduce(rng):
    x = _leaf(rng.standard_normal((2, 3, 4)))
    return _scalarize(lambda: T.tsum(x, axis=1) * T.reshape(T.mean(x, axis=(1, 2), keepdims=True), (2, 1)), rng), [x]


def _b_shape(rng):
    x = _leaf(rng.standard_normal((2, 3, 4)))
    y = _leaf(rng.standard_normal((2, 4, 3)))
    return _scalarize(lambda: T.concat([T.reshape(T.transpose(x, (0, 2, 1)), (2, 12)),
                                        T.reshape(T.swapaxes(y, 0, 0), (2, 12))[:, ::-1]], axis=1), rng), [x, y]


def _b_stack_pad(rng):
    x = _leaf(rng.standard_normal((2, 3)))
    y = _leaf(rng.standard_normal((2, 3)))
    return _scalarize(lambda: T.pad(T.stack([x, y], axis=1), ((0, 0), (1, 2), (0, 1)), value=1.0), rng), [x, y]


def _b_getitem(rng):
    x = _leaf(rng.standard_normal((4, 5)))
    idx = np.array([0, 2, 2, 3])
    return _scalarize(lambda: x[idx, 1:4] + x[1, :3], rng), [x]


def _b_upsample(rng):
    x = _leaf(rng.standard_normal((2, 2, 2, 3)))
    return _scalarize(lambda: T.upsample_nearest2d(x, 2), rng), [x]


def _b_where(rng):
    a, b = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((1, 4)))
    mask = rng.random((3, 4)) > 0.5
    return _scalarize(lambda: T.where(mask, a, b), rng), [a, b]


def _b_sort(rng):
    base = np.linspace(-2, 2, 12)
    x = _leaf(rng.permutation(base).reshape(3, 4) + rng.uniform(-0.05, 0.05, (3, 4)))
    return _scalarize(lambda: T.sort(x, axis=-1), rng), [x]


def _b_softmax(rng):
    x = _leaf(rng.standard_normal((3, 5)))
    return _scalarize(lambda: T.softmax(x, axis=-1) + T.log_softmax(x, axis=0), rng), [x]


def _b_conv(stride=1, padding=1, groups=1, bias=True):
    def build(rng):
        x = _leaf(rng.standard_normal((2, 4, 5, 6)))
        w = _leaf(rng.standard_normal((6, 4 // groups, 3, 3)) * 0.3)
        b = _leaf(rng.standard_normal(6)) if bias else None
        leaves = [x, w] + ([b] if bias else [])
        return _scalarize(lambda: T.conv2d(x, w, b, stride=stride, padding=padding, groups=groups), rng), leaves
    return build


def _b_batchnorm(rng):
    x = _leaf(rng.standard_normal((3, 2, 2, 3)))
    return _scalarize(lambda: T.batch_norm_normalize(x, (0, 2, 3))[0], rng), [x]


def _b_complex(op):
    def build(rng):
        re = _leaf(rng.uniform(0.2, 1.5, (3, 4)) * rng.choice([-1, 1], (3, 4)))
        im = _leaf(_away(rng, (3, 4)))
        return _scalarize(lambda: op(re, im), rng), [re, im]
    return build


def _b_linear(rng):
    lin = Linear(4, 3, rng)
    x = _leaf(rng.standard_normal((2, 4)))
    return _scalarize(lambda: lin(x), rng), [x] + _module_leaves(rng, lin)


def _b_spectral(rng):
    w = _leaf(rng.standard_normal((4, 3, 2, 2)))
    sn = SpectralNorm(4, 12, rng)
    spectral_normalize(w, sn, update=True, n_iter=5)
    return _scalarize(lambda: spectral_normalize(w, sn, update=False), rng), [w]


def _b_cbn(rng):
    cbn = ConditionalBatchNorm2d(3, 5, rng)
    x = _leaf(rng.standard_normal((3, 3, 2, 2)))
    s = _leaf(rng.standard_normal((3, 5)))
    return _scalarize(lambda: cbn(x, s), rng), [x, s] + _module_leaves(rng, cbn)


def _b_bn_module(rng):
    bn = BatchNorm2d(3)
    conv = Conv2d(2, 3, 3, rng, stride=2, padding=1, bias=False)  # BN cancels a conv bias exactly
    x = _leaf(rng.standard_normal((2, 2, 4, 6)))
    return _scalarize(lambda: bn(conv(x)), rng), [x] + _module_leaves(rng, bn, conv)


def _b_masked_mean(rng):
    h = _leaf(rng.standard_normal((3, 2, 2, 8)))
    widths = np.array([16, 7, 32])
    return _scalarize(lambda: masked_width_mean(h, widths, 32), rng), [h]


def _b_dwt(rng):
    x = _leaf(rng.standard_normal((2, 2, 4, 6)))
    return _scalarize(lambda: T.concat(list(haar_dwt2(x).bands()), axis=1), rng), [x]


def _b_dwt_odd(rng):
    x = _leaf(rng.standard_normal((1, 2, 5, 7)))
    return _scalarize(lambda: T.concat(list(haar_dwt2(x).bands()), axis=1), rng), [x]


def _b_idwt(rng):
    bands = [_leaf(rng.standard_normal((2, 2, 2, 3))) for _ in range(4)]
    return _scalarize(lambda: haar_idwt2(WaveletSubbands(*bands)), rng), bands


def _b_hf(rng):
    x = _leaf(rng.standard_normal((2, 1, 4, 8)))
    return _scalarize(lambda: high_frequency(x), rng), [x]


def _b_dft(rng):
    x = _leaf(rng.standard_normal((2, 2, 4, 6)))
    return _scalarize(lambda: T.concat(list(dft2(x)), axis=1), rng), [x]


def _b_dft_polar(rng):
    x = _leaf(rng.standard_normal((1, 3, 3, 5)))

    def f():
        st = dft2_amp_phase(x)
        return T.concat([st.amplitudes, st.phases], axis=1)
    return _scalarize(f, rng), [x]


def _b_swd(rng):
    p, q = _leaf(rng.standard_normal((2, 6, 3))), _leaf(rng.standard_normal((2, 6, 3)) + 0.5)
    seed = int(rng.integers(0, 1000))
    return (lambda: sliced_wasserstein(p, q, n_proj=16, seed=seed)), [p, q]


def _b_fdl(rng):
    a, b = _leaf(rng.standard_normal((2, 3, 3, 5))), _leaf(rng.standard_normal((2, 3, 3, 5)))
    seed = int(rng.integers(0, 1000))
    return (lambda: fdl_loss(a, b, lambda_phase=1.0, n_proj=16, seed=seed)), [b]


def _b_patm(axis):
    def build(rng):
        p = PATM(3, 6, axis, rng)
        x = _leaf(rng.standard_normal((2, 3, 4, 5)))
        return _scalarize(lambda: p(x), rng), [x] + _module_leaves(rng, p)
    return build


def _b_token_mix(rng):
    tm = TokenMixing(4, 4, 6, rng)
    x = _leaf(rng.standard_normal((2, 4, 3, 5)))
    return _scalarize(lambda: tm(x), rng), [x] + _module_leaves(rng, tm)


def _b_gates(rng):
    tm = TokenMixing(4, 4, 6, rng)
    x = _leaf(rng.standard_normal((2, 4, 3, 5)))
    return _scalarize(lambda: tm.gates(x), rng), [x] + _module_leaves(rng, tm.gate_fc1, tm.gate_fc2)


def _b_channel_mlp(rng):
    mlp = ChannelMLP(3, 2, rng)
    x = _leaf(_away(rng, (2, 3, 2, 3)))
    return _scalarize(lambda: mlp(x), rng), [x] + _module_leaves(rng, mlp)


def _b_wavegblock(rng):
    blk = WaveGBlock(4, 3, 5, max_h=4, max_w=6, rng=rng)
    x = _leaf(rng.standard_normal((3, 4, 2, 3)))
    s = _leaf(rng.standard_normal((3, 5)))
    return _scalarize(lambda: blk(x, s), rng), [x, s] + _module_leaves(rng, blk)


def _b_two_blocks(rng):
    b1 = WaveGBlock(4, 3, 5, max_h=4, max_w=6, rng=rng)
    b2 = WaveGBlock(3, 2, 5, max_h=8, max_w=12, rng=rng)
    x = _leaf(rng.standard_normal((3, 4, 2, 3)))
    s1, s2 = _leaf(rng.standard_normal((3, 5))), _leaf(rng.standard_normal((3, 5)))
    return _scalarize(lambda: T.tanh(b2(b1(x, s1), s2)), rng), [x, s1, s2] + _module_leaves(rng, b1, b2)


def _b_hinge_d(rng):
    r, f = _leaf(_away(rng, (5, 1), 0.1, 2.5)), _leaf(_away(rng, (5, 1), 0.1, 2.5))
    # keep scores away from the hinge points +-1
    r.data = np.where(np.abs(np.abs(r.data) - 1) < 0.1, r.data * 1.3, r.data)
    f.data = np.where(np.abs(np.abs(f.data) - 1) < 0.1, f.data * 1.3, f.data)
    return (lambda: hinge_d(r, f)), [r, f]


def _b_hinge_g(rng):
    f = _leaf(rng.standard_normal((5, 1)))
    return (lambda: hinge_g(f)), [f]


def _b_ctc(rng):
    x = _leaf(rng.standard_normal((6, 3, 4)))
    targets = [list(rng.integers(0, 3, size=n)) for n in (1, 2, 3)]
    return (lambda: ctc_loss(T.log_softmax(x, axis=-1), targets, [1, 2, 3])), [x]


def _b_writer_ce(rng):
    x = _leaf(rng.standard_normal((4, 5)))
    ids = rng.integers(0, 5, 4)
    return (lambda: writer_ce(x, ids)), [x]


def _b_style_l1(rng):
    z, zr = _leaf(rng.standard_normal((3, 6))), _leaf(rng.standard_normal((3, 6)))
    return (lambda: style_recon_l1(z, zr)), [z, zr]


def _b_kl(rng):
    mu, lv = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((3, 4)) * 0.5)
    return (lambda: kl_gauss(StylePosterior(mu, lv))), [mu, lv]


CASES = [
    Case("add", "tensor", _binary(T.add)),
    Case("sub", "tensor", _binary(T.sub)),
    Case("mul", "tensor", _binary(T.mul)),
    Case("div", "tensor", _binary(T.div)),
    Case("neg", "tensor", _unary(T.neg)),
    Case("power", "tensor", _unary(lambda x: T.power(x, 2.5), positive=True)),
    Case("exp", "tensor", _unary(T.exp)),
    Case("log", "tensor", _unary(T.log, positive=True)),
    Case("sqrt", "tensor", _unary(T.sqrt, positive=True)),
    Case("sin", "tensor", _unary(T.sin)),
    Case("cos", "tensor", _unary(T.cos)),
    Case("tanh", "tensor", _unary(T.tanh)),
    Case("sigmoid", "tensor", _unary(T.sigmoid)),
    Case("abs", "tensor", _unary(T.tabs)),
    Case("relu", "tensor", _unary(T.relu)),
    Case("leaky_relu", "tensor", _unary(T.leaky_relu)),
    Case("clamp", "tensor", _unary(lambda x: T.clamp(x, -1.0, 1.0), lo=0.1, hi=0.9)),
    Case("reduce", "tensor", _b_reduce),
    Case("shape_ops", "tensor", _b_shape),
    Case("stack_pad", "tensor", _b_stack_pad),
    Case("getitem", "tensor", _b_getitem),
    Case("upsample_nearest2d", "tensor", _b_upsample),
    Case("where", "tensor", _b_where),
    Case("sort", "tensor", _b_sort),
    Case("softmax", "tensor", _b_softmax),
    Case("matmul", "tensor", _b_matmul),
    Case("matmul_batched", "tensor", _b_matmul_batched),
    Case("conv2d", "tensor", _b_conv()),
    Case("conv2d_strided", "tensor", _b_conv(stride=(2, 1), padding=(1, 0), bias=False)),
    Case("conv2d_grouped", "tensor", _b_conv(stride=2, padding=0, groups=2)),
    Case("batch_norm", "tensor", _b_batchnorm),
    Case("complex_abs", "tensor", _b_complex(T.complex_abs)),
    Case("complex_angle", "tensor", _b_complex(T.complex_angle)),
    Case("linear", "nn", _b_linear),
    Case("spectral_norm", "nn", _b_spectral),
    Case("conditional_batch_norm", "nn", _b_cbn),
    Case("conv_batch_norm", "nn", _b_bn_module),
    Case("masked_width_mean", "nn", _b_masked_mean),
    Case("haar_dwt2", "frequency", _b_dwt),
    Case("haar_dwt2_odd", "frequency", _b_dwt_odd),
    Case("haar_idwt2", "frequency", _b_idwt),
    Case("high_frequency", "frequency", _b_hf),
    Case("dft2", "frequency", _b_dft),
    Case("dft2_amp_phase", "frequency", _b_dft_polar),
    Case("sliced_wasserstein", "frequency", _b_swd),
    Case("fdl_loss", "frequency", _b_fdl),
    Case("patm_height", "wavemlp", _b_patm("height")),
    Case("patm_width", "wavemlp", _b_patm("width")),
    Case("token_mixing", "wavemlp", _b_token_mix),
    Case("token_gates", "wavemlp", _b_gates),
    Case("channel_mlp", "wavemlp", _b_channel_mlp),
    Case("wavegblock", "wavemlp", _b_wavegblock),
    Case("wavegblock_x2", "wavemlp", _b_two_blocks, tol=COMPOSITE_TOL),
    Case("hinge_d", "losses", _b_hinge_d),
    Case("hinge_g", "losses", _b_hinge_g),
    Case("ctc_loss", "losses", _b_ctc),
    Case("writer_ce", "losses", _b_writer_ce),
    Case("style_recon_l1", "losses", _b_style_l1),
    Case("kl_gauss", "losses", _b_kl),
]

CASE_NAMES = tuple(c.name for c in CASES)


def get_case(name: str) -> Case:
    for c in CASES:
        if c.name == name:
            return c
    raise KeyError(f"unknown gradcheck op {name!r}; available: {', '.join(CASE_NAMES)}")


# -- driver ------------------------------------------------------------------------

def _value(fn) -> float:
    with T.no_grad():
        return float(fn().data)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_once(case: Case, seed: int, eps: float = EPS, max_entries: int = MAX_ENTRIES) -> float:
    """Max relative error over all leaves for one random instance."""
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    with T.default_dtype(np.float64):
        fn, leaves = case.build(rng)
        for leaf in leaves:
            leaf.grad = None
        fn().backward()
        worst = 0.0
        for leaf in leaves:
            analytic = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad
            flat = leaf.data.reshape(-1)
            idx = np.arange(flat.size)
            if flat.size > max_entries:
                idx = rng.choice(flat.size, max_entries, replace=False)
            a = analytic.reshape(-1)[idx]
            num = np.empty(len(idx))
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = _value(fn)
                flat[i] = orig - eps
                fm = _value(fn)
                flat[i] = orig
                num[k] = (fp - fm) / (2 * eps)
            worst = max(worst, relative_error(a, num))
    return worst


def run_case(case: Case, seeds=range(10), eps: float = EPS) -> CheckResult:
    t0 = time.perf_counter()
    worst, worst_seed = -1.0, -1
    for s in seeds:
        e = check_once(case, s, eps)
        if e > worst:
            worst, worst_seed = e, s
    return CheckResult(case.name, worst, worst_seed, case.tol, time.perf_counter() - t0)


def run_suite(names=None, seeds=range(10), eps: float = EPS) -> list:
    cases = CASES if not names else [get_case(n) for n in names]
    return [run_case(c, seeds, eps) for c in cases]
