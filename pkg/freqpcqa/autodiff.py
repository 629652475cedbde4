"""
Reverse-mode automatic differentiation over numpy arrays

Define-by-run: every op records its parents and a backward rule on the
tensor it returns, and ``backward`` walks that trace in reverse
topological order. Gradients accumulate into leaf tensors that require
them until ``zero_grad`` is called; intermediate nodes keep no gradient.

Values default to float32. Feeding float64 arrays (as the gradient checks
do) keeps the whole graph in float64.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_state = threading.local()
_slice = slice  # the op named ``slice`` below shadows the builtin


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """n-dimensional array that records the ops producing it"""

    __array_priority__ = 100  # ndarray <op> Tensor defers to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.asarray(data)
        if dtype is None and not (
            isinstance(data, np.ndarray) and np.issubdtype(array.dtype, np.floating)
        ):
            dtype = np.float32
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{flag})"

    # ------------------------------------------------------------- operators
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Parameter(Tensor):
    """Learnable leaf tensor; ``decay`` marks it for weight decay"""

    def __init__(self, data, decay: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.decay = decay


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if like is not None and not isinstance(value, np.ndarray):
        return Tensor(np.asarray(value, dtype=like.dtype))
    return Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out._op = op
    return out


# ==============================================================================
# Backward pass
# ==============================================================================

def trace(root: Tensor) -> List[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children"""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor):
    """
    Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf that
    requires grad.

    Raises:
        ShapeError: loss is not a scalar
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(trace(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if g.shape != node.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match tensor {node.shape}")
            g = g.astype(node.dtype, copy=False)
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ==============================================================================
# Elementwise and reductions
# ==============================================================================

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), _backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)

    def _backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(a.data / b.data, (a, b), _backward, "div")


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def _backward(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), _backward, "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _result(0.5 * x * (1.0 + t), (a,), _backward, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), _backward, "softmax")


# ==============================================================================
# Shape ops
# ==============================================================================

def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}")

    def _backward(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), _backward, "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if not axes else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        return (g.transpose(inverse),)

    return _result(a.data.transpose(axes), (a,), _backward, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    """Basic slicing or integer-array gather; gradients scatter-add back"""
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, type(Ellipsis))) or p is None or type(p) is _slice
                for p in parts)

    def _backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), _backward, "getitem")


def slice(a: Tensor, axis: int, start: int, stop: int, step: int = 1) -> Tensor:  # noqa: A001
    index = [np.s_[:]] * a.ndim
    index[axis] = np.s_[start:stop:step]
    return getitem(a, tuple(index))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)
        ):
            raise ShapeError(
                f"concat along axis {axis}: shapes {[x.shape for x in tensors]} disagree"
            )
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, _backward, "concat")


# ==============================================================================
# Linear algebra
# ==============================================================================

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def _backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), _backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[..., in] @ weight[out, in].T + bias[out]"""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    fan_in, fan_out = weight.shape[1], weight.shape[0]

    def _backward(g):
        g2 = g.reshape(-1, fan_out)
        gx = g @ weight.data
        gw = g2.T @ x.data.reshape(-1, fan_in)
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, _backward, "linear")


# ==============================================================================
# Convolution and pooling
# ==============================================================================

def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return padded.shape, win  # win: [B, C, Ho, Wo, kh, kw]


def _col2im(g_win: np.ndarray, padded_shape, stride: int, padding: int, h: int, w: int):
    """Scatter-add window gradients [B, C, Ho, Wo, kh, kw] back onto the input"""
    g_padded = np.zeros(padded_shape, dtype=g_win.dtype)
    _, _, ho, wo, kh, kw = g_win.shape
    for i in range(kh):
        for j in range(kw):
            g_padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g_win[..., i, j]
    return g_padded[:, :, padding:padding + h, padding:padding + w]


def _check_conv(op: str, x: Tensor, kh: int, kw: int, stride: int, padding: int):
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be [B, C, H, W], got {x.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"{op}: kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"{op}: invalid stride {stride} / padding {padding}")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(f"{op}: input {x.shape} smaller than kernel {kh}x{kw}")


def conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Dense 2-D cross-correlation, weight [O, C, kh, kw]"""
    o, c, kh, kw = weight.shape
    _check_conv("conv2d", x, kh, kw, stride, padding)
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input {x.shape} has {x.shape[1]} channels, weight expects {c}")
    b, _, h, w = x.shape
    padded_shape, win = _windows(x.data, kh, kw, stride, padding)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    w_mat = weight.data.reshape(o, -1)
    out = (cols @ w_mat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape)
        g_win = (gm @ w_mat).reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gx = _col2im(g_win, padded_shape, stride, padding, h, w)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(np.ascontiguousarray(out), parents, _backward, "conv2d")


def depthwise_conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """One filter per channel, weight [C, 1, kh, kw]"""
    c, one, kh, kw = weight.shape
    _check_conv("depthwise_conv2d", x, kh, kw, stride, padding)
    if one != 1 or x.shape[1] != c:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} does not match weight {weight.shape}")
    h, w = x.shape[2], x.shape[3]
    padded_shape, win = _windows(x.data, kh, kw, stride, padding)
    kernel = weight.data[:, 0]
    out = np.einsum("bchwij,cij->bchw", win, kernel)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _backward(g):
        gw = np.einsum("bchw,bchwij->cij", g, win)[:, None]
        g_win = g[..., None, None] * kernel[None, :, None, None]
        gx = _col2im(g_win, padded_shape, stride, padding, h, w)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, _backward, "depthwise_conv2d")


def avg_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Average pooling; padded zeros count toward the mean"""
    _check_conv("avg_pool2d", x, kernel, kernel, stride, padding)
    h, w = x.shape[2], x.shape[3]
    padded_shape, win = _windows(x.data, kernel, kernel, stride, padding)
    scale = 1.0 / (kernel * kernel)

    def _backward(g):
        g_win = np.broadcast_to((g * scale)[..., None, None], g.shape + (kernel, kernel))
        return (_col2im(g_win, padded_shape, stride, padding, h, w),)

    return _result(win.mean(axis=(-2, -1)), (x,), _backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C]"""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be [B, C, H, W], got {x.shape}")
    h, w = x.shape[2], x.shape[3]

    def _backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape),)

    return _result(x.data.mean(axis=(2, 3)), (x,), _backward, "global_avg_pool")


def bilinear_sample(x: Tensor, rows: Tensor, cols: Tensor) -> Tensor:
    """
    Sample x [B, C, H, W] at fractional locations.

    Args:
        x: feature map
        rows, cols: [B, K, Ho, Wo] sampling coordinates in pixel units;
                    locations outside the map read zero

    Returns:
        [B, C, K, Ho, Wo] interpolated values; gradients flow to x and to
        both coordinate tensors
    """
    if x.ndim != 4 or rows.ndim != 4 or rows.shape != cols.shape or rows.shape[0] != x.shape[0]:
        raise ShapeError(
            f"bilinear_sample: map {x.shape}, rows {rows.shape}, cols {cols.shape} disagree"
        )
    b, c, h, w = x.shape
    xt = x.data.transpose(0, 2, 3, 1)  # gather channels last
    y0 = np.floor(rows.data)
    x0 = np.floor(cols.data)
    ly = rows.data - y0
    lx = cols.data - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    batch = np.arange(b).reshape(b, 1, 1, 1)

    # (row, col, weight, d weight / d ly, d weight / d lx) per corner
    corners = (
        (y0, x0, (1 - ly) * (1 - lx), -(1 - lx), -(1 - ly)),
        (y0, x0 + 1, (1 - ly) * lx, -lx, (1 - ly)),
        (y0 + 1, x0, ly * (1 - lx), (1 - lx), -ly),
        (y0 + 1, x0 + 1, ly * lx, lx, ly),
    )
    out = np.zeros(rows.shape + (c,), dtype=x.dtype)
    keep = is_grad_enabled() and any(t.requires_grad for t in (x, rows, cols))
    gathered = []
    for yc, xc, weight, _, _ in corners:
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        yi = np.clip(yc, 0, h - 1)
        xi = np.clip(xc, 0, w - 1)
        values = xt[batch, yi, xi] * valid[..., None]
        if keep:
            gathered.append((yi, xi, valid, values))
        out += weight[..., None] * values

    def _backward(g):
        gt = g.transpose(0, 2, 3, 4, 1)  # [B, K, Ho, Wo, C]
        gxt = np.zeros_like(xt)
        g_rows = np.zeros_like(rows.data)
        g_cols = np.zeros_like(cols.data)
        for (_, _, weight, dwy, dwx), (yi, xi, valid, values) in zip(corners, gathered):
            np.add.at(gxt, (batch, yi, xi), gt * (weight * valid)[..., None])
            dot = (gt * values).sum(axis=-1)
            g_rows += dot * dwy
            g_cols += dot * dwx
        return gxt.transpose(0, 3, 1, 2), g_rows, g_cols

    return _result(out.transpose(0, 4, 1, 2, 3), (x, rows, cols), _backward, "bilinear_sample")


# ==============================================================================
# Normalization
# ==============================================================================

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Batch norm over [B, C, H, W] per channel.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance); evaluation mode uses the buffers.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm: input {x.shape} does not match {gamma.shape[0]} channels")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        count = 0
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = x_hat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def _backward(g):
        g_gamma = (g * x_hat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        g_hat = g * gamma.data.reshape(shape)
        if training:
            gx = (inv_std.reshape(shape) / count) * (
                count * g_hat
                - g_hat.sum(axis=axes, keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = g_hat * inv_std.reshape(shape)
        return gx, g_gamma, g_beta

    return _result(out, (x, gamma, beta), _backward, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis"""
    d = x.shape[-1]
    if gamma.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} does not match gamma {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std
    out = x_hat * gamma.data + beta.data

    def _backward(g):
        lead = tuple(range(g.ndim - 1))
        g_hat = g * gamma.data
        gx = (inv_std / d) * (
            d * g_hat
            - g_hat.sum(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        return gx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), _backward, "layer_norm")


# ==============================================================================
# Loss
# ==============================================================================

def smooth_l1_loss(pred: Tensor, target: ArrayLike) -> Tensor:
    """Mean of 0.5 d^2 if |d| < 1 else |d| - 0.5, d = target - pred"""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"smooth_l1_loss: predictions {pred.shape} vs targets {target.shape}")
    diff = pred.data - target
    absolute = np.abs(diff)
    quadratic = absolute < 1.0
    per_sample = np.where(quadratic, 0.5 * diff * diff, absolute - 0.5)
    n = max(diff.size, 1)

    def _backward(g):
        slope = np.where(quadratic, diff, np.sign(diff))
        return (g * slope / n,)

    return _result(np.asarray(per_sample.mean(), dtype=pred.dtype), (pred,), _backward, "smooth_l1")
