"""Dense float tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. Whether a parent receives a gradient is decided when the op
is *built*, so toggling ``requires_grad`` on a parameter afterwards never
changes an existing graph. This is what lets a shared sub-network be used as a
trainable encoder and as a frozen critic inside the same forward pass.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_state = {"dtype": np.float32, "grad": True, "debug": False}


def get_default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the element type of newly created tensors.

    Float32 is the working precision; gradient checks run under float64 so
    that finite differences are meaningful at 1e-4 relative error.
    """
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def is_grad_enabled() -> bool:
    return _state["grad"]


def set_debug(flag: bool) -> None:
    """Enable the per-op non-finite sentinel (off by default for speed)."""
    _state["debug"] = bool(flag)


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x)
    dt = _state["dtype"]
    if arr.dtype != dt:
        arr = arr.astype(dt)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_needs", "_backward", "_op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._needs: tuple = ()
        self._backward = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents, t._needs, t._backward, t._op = (), (), None, "leaf"
        return t

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        self.requires_grad = bool(flag)
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})\n{self.data!r}"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method sugar -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state["dtype"]), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_state["dtype"]), requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str = "op") -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward_fn(g)`` must return one gradient (or None) per parent. Parents
    that do not require grad at this moment are never propagated into.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    needs = tuple(p.requires_grad for p in parents)
    if _state["grad"] and any(needs):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._needs = needs
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents, out._needs, out._backward = (), (), None
    return out


# -- backward engine ---------------------------------------------------------

def _toposort(roots: Iterable[Tensor]) -> list:
    order, visited = [], set()
    for root in roots:
        if id(root) in visited:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p, need in zip(node._parents, node._needs):
                if need and id(p) not in visited:
                    stack.append((p, False))
    return order


def backward(roots, grads=None) -> None:
    """Accumulate d(roots)/d(leaf) into every tracked leaf's ``grad``.

    ``roots`` may be one tensor or a list; ``grads`` supplies the upstream
    gradient per root. A lone root without a gradient must be a scalar.
    Repeated calls accumulate; callers zero grads themselves.
    """
    if isinstance(roots, Tensor):
        roots = [roots]
        grads = [grads]
    elif grads is None:
        grads = [None] * len(roots)
    gmap: dict = {}
    live = []
    for r, g in zip(roots, grads):
        if g is None:
            if r.data.size != 1:
                raise ValueError(f"backward on non-scalar tensor of shape {r.shape} needs an explicit gradient")
            g = np.ones_like(r.data)
        else:
            g = np.asarray(g, dtype=r.data.dtype)
            if g.shape != r.shape:
                raise ValueError(f"gradient shape {g.shape} does not match tensor shape {r.shape}")
        if not r.requires_grad:
            continue
        live.append(r)
        gmap[id(r)] = gmap[id(r)] + g if id(r) in gmap else g
    for node in reversed(_toposort(live)):
        g = gmap.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, need, pg in zip(node._parents, node._needs, pgrads):
            if not need or pg is None:
                continue
            k = id(p)
            gmap[k] = gmap[k] + pg if k in gmap else pg


# -- helpers -------------------------------------------------------------------

def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise binary --------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ra, rb = a.requires_grad, b.requires_grad

    def bw(g):
        return (unbroadcast(g * b.data, a.shape) if ra else None,
                unbroadcast(g * a.data, b.shape) if rb else None)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ra, rb = a.requires_grad, b.requires_grad
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (unbroadcast(g / b.data, a.shape) if ra else None,
                unbroadcast(-g * out / b.data, b.shape) if rb else None)

    return make_node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return make_node(out, (a,), bw, "pow")


# -- elementwise unary ---------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return make_node(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clamp")


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; binary kinds take ``b`` (tensor or scalar)."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"sin": sin, "cos": cos, "exp": exp, "log": log, "abs": tabs,
             "relu": relu, "leaky_relu": leaky_relu, "tanh": tanh}
    if op_kind in binary:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return binary[op_kind](a, b)
    if op_kind in unary:
        return unary[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- reductions & shape ops ----------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_node(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        gx = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return make_node(np.array(out, copy=True) if np.ndim(out) else np.asarray(out), (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return make_node(out, ts, bw, "stack")


def pad(a, pad_width, value: float = 0.0) -> Tensor:
    """Constant padding; ``pad_width`` follows ``numpy.pad``."""
    a = as_tensor(a)
    pw = [tuple(p) for p in pad_width]
    out = np.pad(a.data, pw, mode="constant", constant_values=value)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.shape))
    return make_node(out, (a,), lambda g: (g[sl],), "pad")


def upsample_nearest2d(a, factor: int = 2) -> Tensor:
    a = as_tensor(a)
    B, C, H, W = a.shape
    out = np.repeat(np.repeat(a.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return make_node(out, (a,), bw, "upsample")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``mask`` else ``b``; mask is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(np.where(mask, g, 0), sa), unbroadcast(np.where(mask, 0, g), sb)

    return make_node(out.astype(np.result_type(a.data, b.data)), (a, b), bw, "where")


def sort(a, axis: int = -1) -> Tensor:
    """Ascending sort; gradient is routed back through the permutation."""
    a = as_tensor(a)
    idx = np.argsort(a.data, axis=axis, kind="stable")
    out = np.take_along_axis(a.data, idx, axis=axis)

    def bw(g):
        gx = np.zeros_like(g)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return make_node(out, (a,), bw, "sort")


# -- softmax family ------------------------------------------------------------

def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), bw, "log_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None
    ra, rb = a.requires_grad, b.requires_grad

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if ra else None
        gb = None
        if rb:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch into rows: one large GEMM instead of many small ones
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


# -- convolution ---------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, Ho: int, Wo: int) -> np.ndarray:
    """Strided view (B, C, Ho, Wo, kh, kw) over a padded NCHW array."""
    B, C, H, W = xp.shape
    s = xp.strides
    return as_strided(xp, shape=(B, C, Ho, Wo, kh, kw),
                      strides=(s[0], s[1], s[2] * sh, s[3] * sw, s[2], s[3]), writeable=False)


def conv_output_shape(H: int, W: int, kh: int, kw: int, stride=1, padding=0) -> tuple:
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    return (H + 2 * ph - kh) // sh + 1, (W + 2 * pw - kw) // sw + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation (kernels are not flipped), NCHW layout.

    ``weight`` has shape (C_out, C_in // groups, kh, kw).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    B, C, H, W = x.shape
    Co, Cg, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if C % groups or Co % groups or C // groups != Cg:
        raise ValueError(f"conv2d: {C} input channels, {Co} output channels and kernel {weight.shape} "
                         f"are inconsistent with groups={groups}")
    Ho, Wo = conv_output_shape(H, W, kh, kw, (sh, sw), (ph, pw))
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: invalid geometry, output extents would be ({Ho}, {Wo}) "
                         f"for input {H}x{W}, kernel {kh}x{kw}, stride {(sh, sw)}, padding {(ph, pw)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    xp = np.ascontiguousarray(xp)
    win = _windows(xp, kh, kw, sh, sw, Ho, Wo)
    G, Cog = groups, Co // groups
    K = Cg * kh * kw
    # cols: (G, B*Ho*Wo, Cg*kh*kw)
    cols = win.reshape(B, G, Cg, Ho, Wo, kh, kw).transpose(1, 0, 3, 4, 2, 5, 6).reshape(G, B * Ho * Wo, K)
    wmat = weight.data.reshape(G, Cog, K)
    out = cols @ wmat.transpose(0, 2, 1)  # (G, N, Cog)
    out = out.reshape(G, B, Ho, Wo, Cog).transpose(1, 0, 4, 2, 3).reshape(B, Co, Ho, Wo)
    rx, rw = x.requires_grad, weight.requires_grad
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, Co, 1, 1)
        parents = (x, weight, bias)

    def bw(g):
        g2 = g.reshape(B, G, Cog, Ho, Wo).transpose(1, 0, 3, 4, 2).reshape(G, B * Ho * Wo, Cog)
        gw = (g2.transpose(0, 2, 1) @ cols).reshape(Co, Cg, kh, kw) if rw else None
        gx = None
        if rx:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            if G == 1:
                # one (Ci x Co) @ (Co x Ho*Wo) product per kernel tap, no column buffer
                gflat = g.reshape(B, Co, Ho * Wo)
                taps = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # BLAS needs unit strides
                for i in range(kh):
                    for j in range(kw):
                        tap = (taps[i, j] @ gflat).reshape(B, C, Ho, Wo)
                        gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += tap
            else:
                gcols = (g2 @ wmat).reshape(G, B, Ho, Wo, Cg, kh, kw).transpose(1, 0, 4, 2, 3, 5, 6)
                gcols = gcols.reshape(B, C, Ho, Wo, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gcols[..., i, j]
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_node(out, parents, bw, "conv2d")


# -- normalization -------------------------------------------------------------

def batch_norm_normalize(x, axes=(0, 2, 3), eps: float = 1e-5):
    """Standardize over ``axes`` with batch statistics.

    Returns the normalized tensor plus (mean, biased variance) as plain arrays
    so callers can maintain running statistics.
    """
    x = as_tensor(x)
    axes = tuple(axes)
    n = 1
    for ax in axes:
        n *= x.shape[ax]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gs = g.sum(axis=axes, keepdims=True)
        gxs = (g * xhat).sum(axis=axes, keepdims=True)
        return (inv * (g - gs / n - xhat * gxs / n),)

    return make_node(xhat, (x,), bw, "batch_norm"), mu, var


# -- polar decomposition of complex pairs ---------------------------------------

def complex_abs(re, im, eps: float = 1e-8) -> Tensor:
    """Modulus of re + i·im; gradient is zeroed where the modulus is below eps."""
    re, im = as_tensor(re), as_tensor(im)
    amp = np.sqrt(re.data * re.data + im.data * im.data)
    safe = amp >= eps
    denom = np.where(safe, amp, 1.0)

    def bw(g):
        s = np.where(safe, g / denom, 0.0)
        return s * re.data, s * im.data

    return make_node(amp, (re, im), bw, "complex_abs")


def complex_angle(re, im, eps: float = 1e-8) -> Tensor:
    """atan2(im, re) in (-pi, pi]; defined as 0 (with zero gradient) where |re + i·im| < eps."""
    re, im = as_tensor(re), as_tensor(im)
    r2 = re.data * re.data + im.data * im.data
    safe = np.sqrt(r2) >= eps
    ang = np.where(safe, np.arctan2(im.data, re.data), 0.0).astype(re.data.dtype)
    # atan2 returns -pi on the negative real axis with -0.0 imaginary part
    ang = np.where(ang == -np.pi, np.pi, ang).astype(re.data.dtype)
    denom = np.where(safe, r2, 1.0)

    def bw(g):
        s = np.where(safe, g / denom, 0.0)
        return -s * im.data, s * re.data

    return make_node(ang, (re, im), bw, "complex_angle")
