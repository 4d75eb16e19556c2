"""Minimal reverse-mode autodiff over dense numpy arrays.

Every kernel computes its forward value with numpy and, when any input
requires a gradient and a :class:`Tape` is active, records a closure that
maps the output gradient to input gradients. :func:`backward` replays the
tape in reverse order, so recurrent state carried across timesteps is
differentiated through the full unrolled graph (BPTT).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError, ValueError):
    pass


class EmptyTape(AutodiffError):
    pass


class NonFiniteValue(AutodiffError, FloatingPointError):
    pass


class DegenerateBatch(AutodiffError, ValueError):
    pass


class Tensor:
    """A dense array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __float__(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of kernel applications since the tape was opened."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        arr = np.asarray(x)
        dtype = arr.dtype if arr.dtype.kind == "f" else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{op} produced non-finite values")


def record(op: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    _check_finite(out_data, op)
    tape = active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor, loss_grad=None) -> dict:
    """Reverse-accumulate gradients of ``loss`` through ``tape``.

    Returns a mapping from every leaf tensor with ``requires_grad`` reached
    by the graph to its gradient; the same array is also stored on
    ``leaf.grad`` (added to any gradient already there). The tape is
    cleared afterwards so it cannot be replayed twice.
    """
    if not tape.nodes:
        raise EmptyTape("backward called on an empty tape")
    if loss_grad is None:
        loss_grad = np.ones_like(loss.data)
    grads = {id(loss): np.asarray(loss_grad, dtype=loss.data.dtype)}
    leaves: dict[int, Tensor] = {}
    produced = {id(n.out) for n in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    result = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
        result[t] = g
    tape.clear()
    return result


# ---------------------------------------------------------------- elementwise


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain scalars/arrays adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, b.dtype), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    sa, sb = a.shape, b.shape
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    sa, sb = a.shape, b.shape
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    ad, bd = a.data, b.data
    return record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data / b.data
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    ad, bd = a.data, b.data
    return record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return record("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1 + np.tanh(0.5 * x.data))
    return record("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def softplus(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    y = np.logaddexp(0, xd).astype(xd.dtype)
    sig = 0.5 * (1 + np.tanh(0.5 * xd))
    return record("softplus", y, (x,), lambda g: (g * sig,))


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return record("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return record("square", xd * xd, (x,), lambda g: (2 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return record("sqrt", y, (x,), lambda g: (g * 0.5 / np.where(y > 0, y, np.inf),))


def power(x: Tensor, r: float) -> Tensor:
    """x**r for positive x."""
    x = as_tensor(x)
    xd = x.data
    y = xd ** r
    return record("power", y, (x,), lambda g: (g * r * xd ** (r - 1),))


def heaviside(z: Tensor, width: float = 1.0, smooth: bool = False) -> Tensor:
    """Spike nonlinearity: 1 where z > 0, with a triangular surrogate derivative.

    The backward pass uses ``max(0, 1 - |z|/width) / width`` in place of the
    Dirac delta. With ``smooth=True`` the forward instead returns the
    integral of that triangle (a piecewise-quadratic ramp), which makes the
    surrogate the exact derivative; used only for finite-difference checks.
    """
    z = as_tensor(z)
    zd = z.data
    surr = np.maximum(0.0, 1.0 - np.abs(zd) / width) / width
    surr = surr.astype(zd.dtype)
    if smooth:
        a = np.clip(zd / width, -1.0, 1.0)
        out = np.where(a < 0, 0.5 * (1 + a) ** 2, 1 - 0.5 * (1 - a) ** 2).astype(zd.dtype)
    else:
        out = (zd > 0).astype(zd.dtype)
    return record("heaviside", out, (z,), lambda g: (g * surr,))


# ---------------------------------------------------------------- reductions / shape


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    return record("sum", np.asarray(x.data.sum(), dtype=dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return scale(sum_all(x), 1.0 / max(x.data.size, 1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeMismatch(f"cannot concatenate {t.shape} with {ref} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", out, tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, out_shape, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = out_shape
    # one transpose up front so every tap below adds a contiguous block
    taps = np.ascontiguousarray(dcols.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    hp, wp = h + 2 * padding, w + 2 * padding
    # room for taps that overrun the last stride step
    buf = np.zeros((n, c, max(hp, (ho - 1) * stride + kh), max(wp, (wo - 1) * stride + kw)),
                   dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + stride * (ho - 1) + 1 : stride,
                j : j + stride * (wo - 1) + 1 : stride] += taps[i, j]
    return buf[:, :, padding : padding + h, padding : padding + w]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    o, c, kh, kw = w.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeMismatch(f"conv2d input {x.shape} incompatible with weight {w.shape}")
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    y = cols @ w.reshape(o, -1).T
    y = y.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``weight`` [O,C,kh,kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    wd = weight.data
    y, cols = _conv_forward(x.data, wd, stride, padding)
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data.reshape(1, -1, 1, 1)
    xshape = x.shape
    o, c, kh, kw = wd.shape
    ho, wo = y.shape[2], y.shape[3]

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(wd.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _col2im(g2 @ wd.reshape(o, -1), xshape, kh, kw, stride, padding, ho, wo)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    return record("conv2d", y, (x, weight, bias), bwd)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is [C_in, C_out, kh, kw].

    Output size is ``(H - 1) * stride - 2 * padding + kh``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    wd = weight.data
    ci, co, kh, kw = wd.shape
    if x.ndim != 4 or x.shape[1] != ci:
        raise ShapeMismatch(f"conv_transpose2d input {x.shape} incompatible with weight {wd.shape}")
    n, _, h, w = x.shape
    hout = (h - 1) * stride - 2 * padding + kh
    wout = (w - 1) * stride - 2 * padding + kw
    if hout < 1 or wout < 1:
        raise ShapeMismatch("transposed convolution output would be empty")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, ci)
    y = _col2im(x2 @ wd.reshape(ci, -1), (n, co, hout, wout), kh, kw, stride, padding, h, w)
    y = np.ascontiguousarray(y)
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data.reshape(1, -1, 1, 1)

    def bwd(g):
        gx = gw = None
        if x.requires_grad:
            gx, _ = _conv_forward(g, wd, stride, padding)
        if weight.requires_grad:
            gcols, _, _ = _im2col(g, kh, kw, stride, padding)
            gw = (x2.T @ gcols).reshape(wd.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    return record("conv_transpose2d", y, (x, weight, bias), bwd)


# ---------------------------------------------------------------- resampling


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Align-corners=False bilinear upsampling by an integer factor."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    mh = _interp_matrix(h, h * factor, x.dtype)
    mw = _interp_matrix(w, w * factor, x.dtype)
    y = np.einsum("ph,nchw,qw->ncpq", mh, x.data, mw, optimize=True)
    return record("upsample", y, (x,),
                   lambda g: (np.einsum("ph,ncpq,qw->nchw", mh, g, mw, optimize=True),))


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


# ---------------------------------------------------------------- batch norm through time


@dataclass
class BNTTState:
    """Per-timestep affine parameters and running statistics for one layer."""

    gamma: list
    beta: list
    running_mean: list
    running_var: list
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, timesteps: int, dtype=DEFAULT_DTYPE, name: str = "bn",
               momentum: float = 0.1, eps: float = 1e-5) -> "BNTTState":
        return cls(
            gamma=[Tensor(np.ones(channels, dtype), True, f"{name}.gamma{t}") for t in range(timesteps)],
            beta=[Tensor(np.zeros(channels, dtype), True, f"{name}.beta{t}") for t in range(timesteps)],
            running_mean=[np.zeros(channels, dtype) for _ in range(timesteps)],
            running_var=[np.ones(channels, dtype) for _ in range(timesteps)],
            momentum=momentum,
            eps=eps,
        )

    @property
    def timesteps(self) -> int:
        return len(self.gamma)

    def parameters(self) -> list:
        return list(self.gamma) + list(self.beta)


def bntt_forward(x: Tensor, t: int, state: BNTTState, mode: str = "train") -> Tensor:
    """Batch-normalize ``x`` [N,C,H,W] with the statistics of timestep ``t``."""
    x = as_tensor(x)
    if not 0 <= t < state.timesteps:
        raise IndexError(f"timestep {t} outside [0, {state.timesteps})")
    gamma, beta = state.gamma[t], state.beta[t]
    xd = x.data
    dt = xd.dtype
    eps = dt.type(state.eps)
    if mode == "train":
        if xd.shape[0] < 2:
            raise DegenerateBatch("BNTT in train mode needs a batch of at least 2")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = dt.type(state.momentum)
        count = xd.size // xd.shape[1]
        unbiased = var * (count / max(count - 1, 1))
        state.running_mean[t] = ((1 - m) * state.running_mean[t] + m * mu).astype(dt)
        state.running_var[t] = ((1 - m) * state.running_var[t] + m * unbiased).astype(dt)
    elif mode == "eval":
        mu, var = state.running_mean[t], state.running_var[t]
    else:
        raise ValueError(f"unknown BNTT mode {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (xd - mu.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    gd = gamma.data.reshape(1, -1, 1, 1)
    y = xhat * gd + beta.data.reshape(1, -1, 1, 1)
    train = mode == "train"

    def bwd(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gd
        if train:
            m_count = xd.size // xd.shape[1]
            gx = (inv.reshape(1, -1, 1, 1) / m_count) * (
                m_count * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(1, -1, 1, 1)
        return gx, gg, gb

    return record("bntt", y.astype(dt), (x, gamma, beta), bwd)


def numerical_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-3,
                   indices: Iterable | None = None) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to ``arr`` (in place)."""
    out = np.zeros(arr.shape, dtype=np.float64)
    idx_iter = indices if indices is not None else np.ndindex(arr.shape)
    for idx in idx_iter:
        orig = arr[idx]
        arr[idx] = orig + step
        fp = f()
        arr[idx] = orig - step
        fm = f()
        arr[idx] = orig
        out[idx] = (fp - fm) / (2 * step)
    return out
