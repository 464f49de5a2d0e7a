"""Dense float tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 for gradient checking)
and record a tape of parent links plus vector-Jacobian closures as ops are
applied. ``backward(loss)`` walks the tape in reverse topological order and
accumulates d(loss)/d(leaf) into every requires-grad leaf.

Conventions:
  - image tensors are NCHW (batch, channels, height, width); conv kernels are
    (out_channels, in_channels, kh, kw)
  - binary ops require matching dtypes; python scalars adopt the tensor dtype
  - every op output is checked for non-finite values unless disabled via
    set_finite_checks(False)
  - tapes are single-owner: a graph built on one worker must not be shared
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import special as _sp_special

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes do not conform; message names both shapes."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or infinity outside its error contract."""


_grad_enabled = True
_finite_checks = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self.name = name

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{req}{nm})"

    # -- graph --------------------------------------------------------------

    def detach(self) -> "Tensor":
        """Constant view of the same values, cut from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict:
        return backward(self)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype.name} vs {b.dtype.name}")


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Optional[Callable], op: str) -> Tensor:
    if _finite_checks:
        # single-pass screen: a non-finite element makes the sum non-finite
        # (all-finite overflow is impossible at this library's value scales);
        # confirm with the exact check before raising
        with np.errstate(over="ignore", invalid="ignore"):
            total = float(np.sum(data))
        if not np.isfinite(total) and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, write_leaves: bool = True) -> dict:
    """Reverse-mode sweep from a scalar loss.

    Returns {leaf Tensor: gradient array} for every requires-grad leaf that
    the loss depends on. When ``write_leaves`` the gradient is also added into
    each leaf's ``.grad`` (repeated calls accumulate until ``zero_grad``).
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")

    # iterative topological order over the recorded subgraph
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and (p.requires_grad or p._vjp is not None):
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                if write_leaves:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                prev = leaf_grads.get(node)
                leaf_grads[node] = g if prev is None else prev + g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not (p.requires_grad or p._vjp is not None):
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
    return leaf_grads


# -- elementwise arithmetic --------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b, "add")
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp, "add")


def sub(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b, "sub")
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), vjp, "sub")


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b, "mul")
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), vjp, "mul")


def div(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    data = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(data, (a,), vjp, "power")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / data,)

    return _make(data, (a,), vjp, "sqrt")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _make(data, (a,), vjp, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(data, (a,), vjp, "log")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return _make(data, (a,), vjp, "tanh")


def erf(a: Tensor) -> Tensor:
    data = _sp_special.erf(a.data).astype(a.dtype, copy=False)
    coeff = a.dtype.type(2.0 / np.sqrt(np.pi))

    def vjp(g):
        return (g * coeff * np.exp(-a.data * a.data),)

    return _make(data, (a,), vjp, "erf")


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    return _sp_special.expit(x)


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_stable(a.data)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), vjp, "sigmoid")


def silu(a: Tensor) -> Tensor:
    """Sigmoid-weighted linear unit x * sigmoid(x)."""
    s = _sigmoid_stable(a.data)
    data = a.data * s

    def vjp(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _make(data, (a,), vjp, "silu")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is passed through strictly inside the bounds."""
    data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        return (g * mask,)

    return _make(data, (a,), vjp, "clamp")


# -- reductions ---------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(np.asarray(data), (a,), vjp, "sum")


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims, dtype=a.dtype)
    count = a.size if axis is None else a.size // data.size if data.size else a.size

    def vjp(g):
        scale = a.dtype.type(1.0 / count)
        if axis is None:
            return (np.broadcast_to(g * scale, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 * scale, a.shape).copy(),)

    return _make(np.asarray(data), (a,), vjp, "mean")


def mean_square_error(a: Tensor, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"mean_square_error: shape mismatch {a.shape} vs {b.shape}")
    return mean_(square(sub(a, b)))


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), vjp, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(data, (a,), vjp, "transpose")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    for t in ts[1:]:
        _check_dtypes(ts[0], t, "concat")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _make(data, tuple(ts), vjp, "concat")


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing with gradient scatter to the source slots."""
    data = a.data[idx]

    def vjp(g):
        ga = np.zeros(a.shape, dtype=a.dtype)
        ga[idx] = g
        return (ga,)

    return _make(np.asarray(data), (a,), vjp, "getitem")


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), vjp, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    data = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _make(data, (a,), vjp, "softmax")


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Scaled dot-product attention over (batch, length, depth) operands."""
    for t, nm in ((q, "q"), (k, "k"), (v, "v")):
        if t.ndim != 3:
            raise ShapeError(f"attention: {nm} must be rank 3, got {t.shape}")
    if q.shape[-1] != k.shape[-1] or k.shape[1] != v.shape[1]:
        raise ShapeError(f"attention: mismatched shapes q={q.shape} k={k.shape} v={v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), _as_tensor(scale, q.dtype))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    if return_weights:
        return out, weights.data
    return out


# -- image ops (NCHW) ---------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x (N,C,H,W), w (F,C,KH,KW), bias (F,).

    Internally runs channels-last with one GEMM per pass and strided
    accumulation, which avoids im2col copies on the forward path.
    """
    _check_dtypes(x, w, "conv2d")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D x and w, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    F, Cw, KH, KW = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: channel mismatch, x {x.shape} vs w {w.shape}")
    if bias is not None and bias.shape != (F,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({F},)")
    s, p = int(stride), int(padding)
    Ho = (H + 2 * p - KH) // s + 1
    Wo = (W + 2 * p - KW) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} (pad {p})")

    xp = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))  # NHWC
    if p:
        xp = np.pad(xp, ((0, 0), (p, p), (p, p), (0, 0)))
    Hp, Wp = H + 2 * p, W + 2 * p
    # Wstack: (C, KH*KW*F) with (kh, kw) major blocks of F
    wst = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(KH * KW, C, F)
    Wstack = np.ascontiguousarray(wst.transpose(1, 0, 2)).reshape(C, KH * KW * F)

    Y = (xp.reshape(N * Hp * Wp, C) @ Wstack).reshape(N, Hp, Wp, KH * KW, F)
    out_hwc = np.zeros((N, Ho, Wo, F), dtype=x.dtype)
    kidx = 0
    for kh in range(KH):
        for kw in range(KW):
            out_hwc += Y[:, kh : kh + s * Ho : s, kw : kw + s * Wo : s, kidx, :]
            kidx += 1
    if bias is not None:
        out_hwc += bias.data
    data = np.ascontiguousarray(out_hwc.transpose(0, 3, 1, 2))

    def vjp(g):
        go = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (N,Ho,Wo,F)
        go2 = go.reshape(N * Ho * Wo, F)
        # weight grad: scatter go into padded frame per kernel offset, one GEMM
        gop = np.zeros((N, Hp, Wp, KH * KW, F), dtype=x.dtype)
        kidx = 0
        for kh in range(KH):
            for kw in range(KW):
                gop[:, kh : kh + s * Ho : s, kw : kw + s * Wo : s, kidx, :] = go
                kidx += 1
        gW = xp.reshape(N * Hp * Wp, C).T @ gop.reshape(N * Hp * Wp, KH * KW * F)
        gw = np.ascontiguousarray(
            gW.reshape(C, KH * KW, F).transpose(1, 0, 2).reshape(KH, KW, C, F).transpose(3, 2, 0, 1)
        )
        # input grad: one GEMM against retransposed kernel, then gather-add
        Wcat = np.ascontiguousarray(wst.transpose(2, 0, 1)).reshape(F, KH * KW * C)
        T = (go2 @ Wcat).reshape(N, Ho, Wo, KH * KW, C)
        gxp = np.zeros((N, Hp, Wp, C), dtype=x.dtype)
        kidx = 0
        for kh in range(KH):
            for kw in range(KW):
                gxp[:, kh : kh + s * Ho : s, kw : kw + s * Wo : s, :] += T[:, :, :, kidx, :]
                kidx += 1
        if p:
            gxp = gxp[:, p : p + H, p : p + W, :]
        gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        gb = go2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(data, parents, vjp, "conv2d")


def avgpool2x(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2; spatial dims must be even."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2x: need NCHW input, got {x.shape}")
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avgpool2x: H and W must be even, got {x.shape}")
    data = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5), dtype=x.dtype)

    def vjp(g):
        gx = np.broadcast_to(
            g[:, :, :, None, :, None] * x.dtype.type(0.25), (N, C, H // 2, 2, W // 2, 2)
        )
        return (gx.reshape(N, C, H, W).copy(),)

    return _make(data, (x,), vjp, "avgpool2x")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: need NCHW input, got {x.shape}")
    N, C, H, W = x.shape
    data = np.broadcast_to(x.data[:, :, :, None, :, None], (N, C, H, 2, W, 2)).reshape(
        N, C, 2 * H, 2 * W
    )

    def vjp(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(np.ascontiguousarray(data), (x,), vjp, "upsample_nearest2x")


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization over NCHW input with per-channel affine params."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm: need NCHW input, got {x.shape}")
    N, C, H, W = x.shape
    if C % num_groups:
        raise ShapeError(f"group_norm: {num_groups} groups do not divide {C} channels")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} != ({C},)")
    _check_dtypes(x, gamma, "group_norm")
    G = num_groups
    xg = x.data.reshape(N, G, -1)
    mu = xg.mean(axis=2, keepdims=True, dtype=x.dtype)
    var = xg.var(axis=2, keepdims=True, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = ((xg - mu) * inv).reshape(N, C, H, W)
    gb = gamma.data.reshape(1, C, 1, 1)
    data = xhat * gb + beta.data.reshape(1, C, 1, 1)

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gh = (g * gb).reshape(N, G, -1)
        xh = xhat.reshape(N, G, -1)
        m1 = gh.mean(axis=2, keepdims=True, dtype=x.dtype)
        m2 = (gh * xh).mean(axis=2, keepdims=True, dtype=x.dtype)
        gx = ((gh - m1 - xh * m2) * inv).reshape(N, C, H, W)
        return gx, ggamma, gbeta

    return _make(data, (x, gamma, beta), vjp, "group_norm")
