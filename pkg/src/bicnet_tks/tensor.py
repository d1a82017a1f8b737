"""Dense float arrays with reverse-mode gradient tracking.

Provides exactly the operation set the model needs: 2D cross-correlation,
dilated 3-tap temporal convolution, softmax, pooling, nearest-neighbor
upsampling, matrix products, elementwise arithmetic with broadcasting and
a handful of structural ops (reshape / transpose / slice / stack). Video
feature maps follow the [frames, channels, height, width] layout.

Training runs in float32; gradient checking should build everything in
float64 (finite differences are unreliable at single precision).
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "ConfigError",
    "InputError",
    "UsageError",
    "Tensor",
    "Parameter",
    "stack",
    "concatenate",
    "batched_matvec",
    "conv2d",
    "temporal_conv1d",
    "max_pool2d",
    "avg_pool2d",
    "upsample_nearest2d",
    "save_tensor",
    "load_tensor",
]


class ConfigError(ValueError):
    """Incompatible shapes or an inconsistent model configuration."""


class InputError(ValueError):
    """Invalid runtime input (bad segment length, short tracklet, ...)."""


class UsageError(RuntimeError):
    """API misuse, e.g. running backbone stages out of order."""


_FLOATS = (np.float32, np.float64)


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in _FLOATS:
        return arr.astype(np.float32)
    return arr


class Tensor:
    """A numpy array plus an optional reverse-mode gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

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

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- autograd ------------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise UsageError("backward() must start from a scalar tensor")
        topo = []
        seen = set()
        stack_ = [(self, False)]
        while stack_:  # iterative DFS: graphs can exceed the recursion limit
            node, expanded = stack_.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack_.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return power(self, 0.5)

    def softmax(self, axis):
        return softmax(self, axis)


class Parameter(Tensor):
    """A trainable tensor with a (locally unique) name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.requires_grad = bool(flag)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


# ---------------------------------------------------------------------------
# graph plumbing
# ---------------------------------------------------------------------------


def _lift(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else np.float32))


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _make(data, (a,), backward)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward)


def mean_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes])) if axes else 1
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.data.shape) / count)

    return _make(data, (a,), backward)


def max_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    data = a.data.max(axis=axes, keepdims=keepdims)

    def backward(g):
        expanded = data if keepdims else np.expand_dims(data, axes)
        gexp = g if keepdims else np.expand_dims(g, axes)
        mask = a.data == expanded
        counts = mask.sum(axis=axes, keepdims=True)
        _accumulate(a, mask * (gexp / counts))  # ties share the gradient

    return _make(data, (a,), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - inner))

    return _make(y, (a,), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.data.ndim)))
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _make(data, (a,), backward)


def getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data)

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, index, g)

    return _make(data, (a,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        pieces = np.split(g, len(tensors), axis=axis)
        for t, piece in zip(tensors, pieces):
            _accumulate(t, piece.reshape(t.data.shape))

    return _make(data, tuple(tensors), backward)


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accumulate(t, piece)

    return _make(data, tuple(tensors), backward)


def batched_matvec(matrices: Tensor, vector: Tensor) -> Tensor:
    """[K,n,m] stack of matrices times an [m] vector -> [K,n]."""
    if matrices.data.ndim != 3 or vector.data.ndim != 1:
        raise ConfigError("batched_matvec expects [K,n,m] matrices and an [m] vector")
    k, n, m = matrices.data.shape
    if vector.data.shape[0] != m:
        raise ConfigError(f"vector length {vector.data.shape[0]} does not match matrices ({m})")
    return matmul(reshape(matrices, (k * n, m)), vector).reshape((k, n))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    na, nb = a.data.ndim, b.data.ndim
    if na not in (1, 2) or nb not in (1, 2):
        raise ConfigError(f"matmul supports 1D/2D operands, got {na}D @ {nb}D")
    data = a.data @ b.data

    def backward(g):
        if na == 2 and nb == 2:
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        elif na == 2 and nb == 1:
            _accumulate(a, np.outer(g, b.data))
            _accumulate(b, a.data.T @ g)
        elif na == 1 and nb == 2:
            _accumulate(a, b.data @ g)
            _accumulate(b, np.outer(a.data, g))
        else:
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

    return _make(np.asarray(data), (a, b), backward)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def _pool_windows(x: np.ndarray, kh, kw, stride):
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # [B, C, OH, OW, kh, kw]


def _scatter_windows(gwin: np.ndarray, padded_shape, kh, kw, stride) -> np.ndarray:
    """Adjoint of `_pool_windows`: scatter-add window grads back onto the map."""
    out = np.zeros(padded_shape, dtype=gwin.dtype)
    oh, ow = gwin.shape[2], gwin.shape[3]
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gwin[:, :, :, :, i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate [B,Cin,H,W] with [Cout,Cin,kh,kw] filters."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigError("conv2d expects 4D input and 4D weight")
    batch, cin, height, width = x.data.shape
    cout, wcin, kh, kw = weight.data.shape
    if cin != wcin:
        raise ConfigError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise ConfigError("conv2d kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _pool_windows(xp, kh, kw, stride)
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(batch * oh * ow, cin * kh * kw)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    out = (cols @ w2.T).reshape(batch, oh, ow, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(batch * oh * ow, cout)
        _accumulate(weight, (g2.T @ cols).reshape(weight.data.shape))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(batch, oh, ow, cin, kh, kw)
            gwin = dcols.transpose(0, 3, 1, 2, 4, 5)
            dxp = _scatter_windows(gwin, xp.shape, kh, kw, stride)
            if padding:
                dxp = dxp[:, :, padding : padding + height, padding : padding + width]
            _accumulate(x, dxp)

    return _make(np.ascontiguousarray(out), (x, weight), backward)


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    batch, chans, height, width = x.data.shape
    if padding:
        fill = -np.inf
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    else:
        xp = x.data
    win = _pool_windows(xp, kernel, kernel, stride)
    out = win.max(axis=(-2, -1))

    def backward(g):
        mask = win == out[..., None, None]
        counts = mask.sum(axis=(-2, -1), keepdims=True)
        gwin = mask * (g[..., None, None] / counts)
        dxp = _scatter_windows(gwin, xp.shape, kernel, kernel, stride)
        if padding:
            dxp = dxp[:, :, padding : padding + height, padding : padding + width]
        _accumulate(x, dxp)

    return _make(np.ascontiguousarray(out), (x,), backward)


def avg_pool2d(x: Tensor, kernel_h: int, kernel_w: int, stride_h: int = None, stride_w: int = None) -> Tensor:
    """Average pooling; kernel == stride by default (non-overlapping regions)."""
    stride_h = kernel_h if stride_h is None else stride_h
    stride_w = kernel_w if stride_w is None else stride_w
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel_h, kernel_w), axis=(2, 3))
    win = win[:, :, ::stride_h, ::stride_w]
    out = win.mean(axis=(-2, -1))
    scale = 1.0 / (kernel_h * kernel_w)

    def backward(g):
        gwin = np.broadcast_to((g * scale)[..., None, None], g.shape + (kernel_h, kernel_w))
        dx = np.zeros_like(x.data)
        oh, ow = g.shape[2], g.shape[3]
        for i in range(kernel_h):
            for j in range(kernel_w):
                dx[:, :, i : i + stride_h * oh : stride_h, j : j + stride_w * ow : stride_w] += gwin[:, :, :, :, i, j]
        _accumulate(x, dx)

    return _make(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest2d(x: Tensor, factor_h: int, factor_w: int) -> Tensor:
    data = x.data.repeat(factor_h, axis=2).repeat(factor_w, axis=3)
    batch, chans, height, width = x.data.shape

    def backward(g):
        blocks = g.reshape(batch, chans, height, factor_h, width, factor_w)
        _accumulate(x, blocks.sum(axis=(3, 5)))

    return _make(data, (x,), backward)


def temporal_conv1d(x: Tensor, weight: Tensor, dilation: int = 1) -> Tensor:
    """Dilated 3-tap temporal convolution over [T,C,h,w], zero padded so T is kept.

    out[t] = sum over taps j in {-1,0,1} of weight[:,:,j+1] applied across
    channels to x[t + j*dilation], with zeros outside the temporal range.
    """
    if x.data.ndim != 4:
        raise ConfigError("temporal_conv1d expects [T,C,h,w] input")
    frames, chans = x.data.shape[0], x.data.shape[1]
    if weight.data.shape != (chans, chans, 3):
        raise ConfigError(
            f"temporal_conv1d weight must be [C,C,3] with C={chans}, got {weight.data.shape}"
        )

    def shifted(arr, offset):
        """arr advanced by `offset` frames, zero padded: result[t] = arr[t+offset]."""
        out = np.zeros_like(arr)
        if offset >= arr.shape[0] or offset <= -arr.shape[0]:
            return out
        if offset >= 0:
            out[: arr.shape[0] - offset] = arr[offset:]
        else:
            out[-offset:] = arr[: arr.shape[0] + offset]
        return out

    taps = [shifted(x.data, j * dilation) for j in (-1, 0, 1)]
    out = np.zeros_like(x.data)
    for j, tap in enumerate(taps):
        out += np.einsum("oc,tchw->tohw", weight.data[:, :, j], tap)

    def backward(g):
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            for j, tap in enumerate(taps):
                dw[:, :, j] = np.einsum("tohw,tchw->oc", g, tap)
            _accumulate(weight, dw)
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for j in range(3):
                contrib = np.einsum("oc,tohw->tchw", weight.data[:, :, j], g)
                # g[t] reached x[t + (j-1)*dilation]; push back the other way
                dx += shifted(contrib, -(j - 1) * dilation)
            _accumulate(x, dx)

    return _make(out, (x, weight), backward)


# ---------------------------------------------------------------------------
# binary tensor file format
# ---------------------------------------------------------------------------

_BTKS_MAGIC = b"BTKS"
_BTKS_VERSION = 1


def save_tensor(path, tensor):
    """Write an array as magic 'BTKS', version u8, rank u8, u32 extents, f32 payload."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_BTKS_MAGIC)
        fh.write(struct.pack("<BB", _BTKS_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _BTKS_MAGIC:
            raise InputError(f"{path}: not a BTKS tensor file")
        version, rank = struct.unpack("<BB", fh.read(2))
        if version != _BTKS_VERSION:
            raise InputError(f"{path}: unsupported BTKS version {version}")
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        payload = fh.read()
    expected = int(np.prod(shape)) * 4 if rank else 4
    if len(payload) != expected:
        raise InputError(f"{path}: truncated payload ({len(payload)} bytes, expected {expected})")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
