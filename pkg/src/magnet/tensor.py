"""Minimal reverse-mode autodiff over numpy arrays.

Activations are laid out NHWC: (batch, height, width, channels).  Every
primitive records its operands and a backward rule on the output tensor;
:class:`Graph` recovers a topological order from the loss and replays the
rules in reverse.

Precision is a process-wide switch: float64 for gradient checks and
oracles, float32 for training.  See :func:`set_precision`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float64
_grad_enabled = True

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


def set_precision(name: str) -> None:
    """Select the dtype used when tensors are created without one."""
    global _default_dtype
    if name not in _DTYPES:
        raise ConfigError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _default_dtype = _DTYPES[name]


def get_precision() -> str:
    return np.dtype(_default_dtype).name


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording a graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An n-dimensional array that can take part in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(Graph.from_output(self), self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{flag})"

    # operator sugar; the named functions below are the primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return multiply_scalar(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return multiply_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


class Graph:
    """Topologically ordered record of the primitives that produced a tensor."""

    def __init__(self, nodes: Sequence[Tensor]):
        self.nodes = list(nodes)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(graph: Graph, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires gradients.

    Gradients of leaves accumulate across calls; clear them with
    ``zero_grad`` between optimizer steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ----------------------------------------------------------------------
# elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def multiply_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,), "multiply_scalar")


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; the gradient is zero where clamping is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), grad_fn, "softmax")


# ----------------------------------------------------------------------
# reductions and reshaping


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    out = a.data.mean(axis=axis)
    count = a.size // max(np.asarray(out).size, 1)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(out), (a,), grad_fn, "mean")


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Join along the channel axis (or ``axis``)."""
    if a.ndim != b.ndim:
        raise ShapeError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    ax = axis % a.ndim
    for i, (x, y) in enumerate(zip(a.shape, b.shape)):
        if i != ax and x != y:
            raise ShapeError(f"concat: shapes {a.shape} and {b.shape} differ off axis {ax}")
    split = a.shape[ax]

    def grad_fn(g):
        return np.take(g, range(split), axis=ax), np.take(g, range(split, g.shape[ax]), axis=ax)

    return _result(np.concatenate([a.data, b.data], axis=ax), (a, b), grad_fn, "concat")


def global_avg_pool(a: Tensor) -> Tensor:
    """(b, h, w, c) -> (b, c)."""
    _require_rank(a, 4, "global_avg_pool")
    b, h, w, c = a.shape

    def grad_fn(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), a.shape).copy(),)

    return _result(a.data.mean(axis=(1, 2)), (a,), grad_fn, "global_avg_pool")


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), grad_fn, "matmul")


def dense(a: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``a @ weights + bias`` over the last axis of a 2-D input."""
    if a.ndim != 2 or weights.ndim != 2 or a.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {a.shape} does not match weights {weights.shape}")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weights {weights.shape}")
    out = a.data @ weights.data
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        grads = [g @ weights.data.T, a.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (a, weights) if bias is None else (a, weights, bias)
    return _result(out, parents, grad_fn, "dense")


# ----------------------------------------------------------------------
# convolution and resampling


def _require_rank(a: Tensor, rank: int, op: str) -> None:
    if a.ndim != rank:
        raise ShapeError(f"{op}: expected a rank-{rank} tensor, got shape {a.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation with a (f, f, cin, cout) kernel."""
    _require_rank(x, 4, "conv2d")
    _require_rank(kernel, 4, "conv2d kernel")
    f, f2, cin, cout = kernel.shape
    if f != f2 or f % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square with odd size, got {f}x{f2}")
    if cin != x.shape[3]:
        raise ShapeError(f"conv2d: kernel expects {cin} input channels, input has {x.shape[3]}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if padding not in ("same", "valid"):
        raise ConfigError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")

    b, h, w, _ = x.shape
    k = kernel.data
    if f == 1:
        flat = x.data.reshape(-1, cin)
        out = (flat @ k[0, 0]).reshape(b, h, w, cout)

        def core_grad(g):
            g2 = g.reshape(-1, cout)
            return (g2 @ k[0, 0].T).reshape(x.shape), (flat.T @ g2).reshape(kernel.shape)

    else:
        pad = f // 2 if padding == "same" else 0
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        ho, wo = h + 2 * pad - f + 1, w + 2 * pad - f + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: {f}x{f} valid window does not fit input {x.shape}")
        out = np.zeros((b, ho, wo, cout), dtype=x.dtype)
        for i in range(f):
            for j in range(f):
                out += xp[:, i:i + ho, j:j + wo, :] @ k[i, j]

        def core_grad(g):
            gxp = np.zeros_like(xp)
            gk = np.zeros_like(k)
            g2 = g.reshape(-1, cout)
            for i in range(f):
                for j in range(f):
                    window = xp[:, i:i + ho, j:j + wo, :]
                    gxp[:, i:i + ho, j:j + wo, :] += g @ k[i, j].T
                    gk[i, j] = window.reshape(-1, cin).T @ g2
            return gxp[:, pad:pad + h, pad:pad + w, :], gk

    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        grads = list(core_grad(g))
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, grad_fn, "conv2d")


def depthwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel f x f same-padded convolution with an (f, f, c) kernel."""
    _require_rank(x, 4, "depthwise_conv2d")
    _require_rank(kernel, 3, "depthwise_conv2d kernel")
    f, f2, c = kernel.shape
    if f != f2 or f % 2 == 0:
        raise ConfigError(f"depthwise_conv2d: kernel must be square with odd size, got {f}x{f2}")
    if c != x.shape[3]:
        raise ShapeError(f"depthwise_conv2d: kernel has {c} channels, input has {x.shape[3]}")

    b, h, w, _ = x.shape
    k = kernel.data
    if f == 1:
        scale = k[0, 0]
        return _result(x.data * scale, (x, kernel),
                       lambda g: (g * scale, (g * x.data).sum(axis=(0, 1, 2)).reshape(k.shape)),
                       "depthwise_conv2d")

    pad = f // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.zeros_like(x.data)
    for i in range(f):
        for j in range(f):
            out += xp[:, i:i + h, j:j + w, :] * k[i, j]

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(k)
        for i in range(f):
            for j in range(f):
                gxp[:, i:i + h, j:j + w, :] += g * k[i, j]
                gk[i, j] = (g * xp[:, i:i + h, j:j + w, :]).sum(axis=(0, 1, 2))
        return gxp[:, pad:pad + h, pad:pad + w, :], gk

    return _result(out, (x, kernel), grad_fn, "depthwise_conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    _require_rank(x, 4, "max_pool2d")
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d: spatial dims must be even, got {h}x{w}")
    windows = (x.data.reshape(b, h // 2, 2, w // 2, 2, c)
               .transpose(0, 1, 3, 5, 2, 4)
               .reshape(b, h // 2, w // 2, c, 4))
    idx = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def grad_fn(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = (gw.reshape(b, h // 2, w // 2, c, 2, 2)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(b, h, w, c))
        return (gx,)

    return _result(out, (x,), grad_fn, "max_pool2d")


def upsample_nearest2d(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of the spatial axes."""
    _require_rank(x, 4, "upsample_nearest2d")
    b, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _result(out, (x,), lambda g: (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),),
                   "upsample_nearest2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over all non-batch axes, then scale/shift per channel."""
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    axes = tuple(range(1, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data
    reduce_axes = tuple(range(x.ndim - 1))

    def grad_fn(g):
        dxhat = g * gamma.data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return _result(out, (x, gamma, beta), grad_fn, "layer_norm")
