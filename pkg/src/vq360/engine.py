"""Dense tensors with taped reverse-mode differentiation.

The design is deliberately small: a ``Tensor`` wraps an immutable numpy
array, a ``Parameter`` is the one mutable kind (learnable state with a
``.grad`` buffer), and a ``Tape`` records every operation executed while
it is active.  ``backward(tape, seed)`` replays the records in reverse
and accumulates vector-Jacobian products into each parameter's ``.grad``.

Conventions
-----------
* float32 and float64 only; operands of one op must share a dtype.
* Tensors produced by ops are frozen (numpy writeable flag cleared).
* Gradients sum across parameter reuse; callers zero grads explicitly.
* The active-tape stack is thread local, so independent threads may
  differentiate independently.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeConsumedError

_REAL_DTYPES = (np.float32, np.float64)

_tls = threading.local()

_finite_checks = False


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf screening of every op output; returns the old value."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


class Tensor:
    """Immutable dense array value."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        if data.dtype not in _REAL_DTYPES:
            data = data.astype(np.float32)
        try:
            data.setflags(write=False)
        except ValueError:
            pass  # views of borrowed read-only memory are already frozen
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

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

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """Learnable tensor: mutable value plus an accumulating ``.grad``."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, value: np.ndarray):
        value = np.array(value)
        if value.dtype not in _REAL_DTYPES:
            raise ShapeError(f"parameter {name!r} must be float32 or float64, got {value.dtype}")
        self.data = value  # stays writeable: optimizers update in place
        self.name = str(name)
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad[...] = 0

    def assign(self, value: np.ndarray):
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(
                f"parameter {self.name!r} has shape {self.data.shape}, cannot assign {value.shape}"
            )
        self.data[...] = value

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Records ops executed while active (``with Tape() as t: ...``).

    A tape is consumed by a single ``backward`` call; reuse raises
    ``TapeConsumedError``.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self._nodes.append(_Node(out, tuple(inputs), vjp))

    @property
    def output(self) -> Tensor | None:
        """The most recently recorded result."""
        return self._nodes[-1].out if self._nodes else None

    def backward(self, seed=None, output: Tensor | None = None):
        return backward(self, seed, output=output)


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
    stack = _tape_stack()
    if stack:
        stack[-1].record(out, inputs, vjp)


def _result(arr: np.ndarray, op: str) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return Tensor(arr)


def tensor(data, dtype=None) -> Tensor:
    """Construct a tensor, copying the input. Default dtype float32."""
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.dtype not in _REAL_DTYPES:
        arr = arr.astype(np.float32)
    return Tensor(arr)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _dtype_of(*tensors: Tensor) -> np.dtype:
    dtype = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dtype:
            raise ShapeError(f"mixed dtypes in one op: {dtype} vs {t.dtype}")
    return dtype


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# pointwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _dtype_of(a, b)
    out = _result(a.data + b.data, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    _record(out, (a, b), vjp)
    return out


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _dtype_of(a, b)
    out = _result(a.data - b.data, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    _record(out, (a, b), vjp)
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _dtype_of(a, b)
    out = _result(a.data * b.data, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    _record(out, (a, b), vjp)
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _result(np.maximum(x.data, 0), "relu")
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    _record(out, (x,), vjp)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # split by sign for stability at large |x|
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _result(y, "sigmoid")

    def vjp(g):
        return (g * y * (1.0 - y),)

    _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        arr = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    out = _result(arr, "reshape")

    def vjp(g):
        return (g.reshape(x.shape),)

    _record(out, (x,), vjp)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation for ndim {x.ndim}")
    out = _result(np.ascontiguousarray(x.data.transpose(axes)), "transpose")
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    _record(out, (x,), vjp)
    return out


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    _dtype_of(*parts)
    axis = int(axis)
    ndim = parts[0].ndim
    if axis < 0:
        axis += ndim
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != ndim or any(
            other[i] != ref[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(
                f"concat shapes differ off axis {axis}: {parts[0].shape} vs {p.shape}"
            )
    out = _result(np.concatenate([p.data for p in parts], axis=axis), "concat")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    _record(out, tuple(parts), vjp)
    return out


def slice_axis(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient zero-fills the rest."""
    x = _as_tensor(x)
    axis = int(axis)
    if axis < 0:
        axis += x.ndim
    n = x.shape[axis]
    if start < 0 or length < 1 or start + length > n:
        raise ShapeError(f"slice [{start}:{start + length}] outside axis {axis} extent {n}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = _result(np.ascontiguousarray(x.data[index]), "slice_axis")

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# reductions


def _normalize_axis(axis: int, ndim: int) -> int:
    axis = int(axis)
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    return axis


def mean(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    out = _result(x.data.mean(axis=axis, keepdims=keepdims), "mean")
    count = x.shape[axis]

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    _record(out, (x,), vjp)
    return out


def reduce_max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; gradient routes to the first argmax."""
    x = _as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    arg = np.argmax(x.data, axis=axis)
    arr = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)
    out = _result(arr if keepdims else arr.squeeze(axis), "reduce_max")

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(arg, axis), g, axis=axis)
        return (full,)

    _record(out, (x,), vjp)
    return out


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element, producing a scalar (shape ()) tensor."""
    x = _as_tensor(x)
    out = _result(np.asarray(x.data.mean(), dtype=x.dtype), "mean_all")
    count = x.size

    def vjp(g):
        return (np.broadcast_to(np.asarray(g) / count, x.shape).astype(x.dtype, copy=True),)

    _record(out, (x,), vjp)
    return out


def global_average_pool(x: Tensor) -> Tensor:
    """Spatial (and temporal) mean: [C,H,W] -> [C]; [B,C,H,W] -> [B,C];
    [B,C,S,H,W] -> [B,C]."""
    x = _as_tensor(x)
    if x.ndim == 3:
        axes = (1, 2)
    elif x.ndim == 4:
        axes = (2, 3)
    elif x.ndim == 5:
        axes = (2, 3, 4)
    else:
        raise ShapeError(f"global_average_pool expects 3 to 5 dims, got {x.ndim}")
    out = _result(x.data.mean(axis=axes), "global_average_pool")
    count = 1
    for a in axes:
        count *= x.shape[a]

    def vjp(g):
        ge = g
        for a in axes:
            ge = np.expand_dims(ge, a)
        return (np.broadcast_to(ge / count, x.shape).copy(),)

    _record(out, (x,), vjp)
    return out


def softmax_over_axis(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, "softmax_over_axis")

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# linear maps


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y[..., o] = sum_i x[..., i] * weight[o, i] + bias[o]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    _dtype_of(x, weight, bias)
    if weight.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weight.shape[0]:
        raise ShapeError(
            f"fully_connected wants weight [O,I] and bias [O], got {weight.shape} / {bias.shape}"
        )
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"fully_connected input features {x.shape[-1]} != weight columns {weight.shape[1]}"
        )
    out = _result(x.data @ weight.data.T + bias.data, "fully_connected")

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, weight.shape[1])
        dw = g2.T @ x2
        db = g2.sum(axis=0)
        dx = (g @ weight.data).reshape(x.shape)
        return dx, dw, db

    _record(out, (x, weight, bias), vjp)
    return out


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: [..., M, K] @ [..., K, N] with equal leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    _dtype_of(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul_batched ranks differ: {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul_batched leading dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul_batched inner dims differ: {a.shape} vs {b.shape}")
    out = _result(a.data @ b.data, "matmul_batched")

    def vjp(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        return da, db

    _record(out, (a, b), vjp)
    return out


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Pointwise channel mix on [C,H,W] or [B,C,H,W]; weight [Co,Ci]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    _dtype_of(x, weight, bias)
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv1x1 expects a 3D or 4D map, got {x.ndim} dims")
    if weight.ndim != 2:
        raise ShapeError(f"conv1x1 weight must be [Co,Ci], got {weight.shape}")
    batched = x.ndim == 4
    ci_axis = 1 if batched else 0
    if x.shape[ci_axis] != weight.shape[1]:
        raise ShapeError(
            f"conv1x1 input channels {x.shape[ci_axis]} != weight columns {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv1x1 bias shape {bias.shape} != ({weight.shape[0]},)")
    if batched:
        arr = np.einsum("oc,bchw->bohw", weight.data, x.data, optimize=True)
        arr += bias.data[None, :, None, None]
    else:
        arr = np.einsum("oc,chw->ohw", weight.data, x.data, optimize=True)
        arr += bias.data[:, None, None]
    out = _result(arr, "conv1x1")

    def vjp(g):
        if batched:
            dx = np.einsum("oc,bohw->bchw", weight.data, g, optimize=True)
            dw = np.einsum("bohw,bchw->oc", g, x.data, optimize=True)
            db = g.sum(axis=(0, 2, 3))
        else:
            dx = np.einsum("oc,ohw->chw", weight.data, g, optimize=True)
            dw = np.einsum("ohw,chw->oc", g, x.data, optimize=True)
            db = g.sum(axis=(1, 2))
        return dx, dw, db

    _record(out, (x, weight, bias), vjp)
    return out


# ---------------------------------------------------------------------------
# grid-sampled convolution


def conv2d_sampled(x: Tensor, weight: Tensor, bias: Tensor, grid) -> Tensor:
    """Convolution whose taps are bilinear reads at grid-supplied locations.

    ``grid`` is a KernelSamplingGrid: for every output pixel it lists k*k
    fractional source coordinates.  Gather and scatter both run as one
    sparse-matrix product, so forward and backward agree to rounding.

    x: [Ci,H,W] or [B,Ci,H,W]; weight: [Co,Ci,k,k]; bias: [Co] or None
    (a convolution feeding a normalizer carries no bias of its own).
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if bias is not None:
        bias = _as_tensor(bias)
        dtype = _dtype_of(x, weight, bias)
    else:
        dtype = _dtype_of(x, weight)
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d_sampled expects 3D or 4D input, got {x.ndim} dims")
    batched = x.ndim == 4
    xb = x.data if batched else x.data[None]
    b_n, ci, h, w = xb.shape
    k = grid.kernel_size
    if weight.shape != (weight.shape[0], ci, k, k):
        raise ShapeError(
            f"weight {weight.shape} incompatible with {ci} input channels and kernel {k}"
        )
    co = weight.shape[0]
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} != ({co},)")
    if (h, w) != (grid.in_height, grid.in_width):
        raise ShapeError(
            f"input map {h}x{w} does not match grid built for {grid.in_height}x{grid.in_width}"
        )
    gather, scatter = grid.matrices(dtype)  # [P*T, H*W] and its transpose
    p = grid.out_height * grid.out_width
    t = k * k

    flat = xb.reshape(b_n * ci, h * w)
    sampled = gather @ flat.T                      # [P*T, B*Ci]
    cols = sampled.reshape(p, t, b_n, ci)
    patches = cols.transpose(2, 0, 3, 1).reshape(b_n, p, ci * t)
    wm = weight.data.reshape(co, ci * t)
    m = patches @ wm.T
    if bias is not None:
        m += bias.data
    arr = m.transpose(0, 2, 1).reshape(b_n, co, grid.out_height, grid.out_width)
    if not batched:
        arr = arr[0]
    out = _result(arr, "conv2d_sampled")

    def vjp(g):
        gb = g if batched else g[None]
        gm = gb.reshape(b_n, co, p).transpose(0, 2, 1)          # [B,P,Co]
        dw = (gm.reshape(-1, co).T @ patches.reshape(-1, ci * t)).reshape(weight.shape)
        dpatch = (gm.reshape(-1, co) @ wm).reshape(b_n, p, ci, t)
        dcols = dpatch.transpose(1, 3, 0, 2).reshape(p * t, b_n * ci)
        dflat = scatter @ dcols                                  # [H*W, B*Ci]
        dx = dflat.T.reshape(xb.shape)
        if not batched:
            dx = dx[0]
        if bias is None:
            return dx, dw
        return dx, dw, gb.sum(axis=(0, 2, 3))

    _record(out, (x, weight, bias) if bias is not None else (x, weight), vjp)
    return out


# ---------------------------------------------------------------------------
# 3D convolution (symmetric padding, odd kernels)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-extent 3D convolution over [*, C, S, H, W] with symmetric padding.

    weight: [Co, Ci, k, k, k] with odd k; pad = k // 2 must not exceed any
    spatio-temporal extent.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    _dtype_of(x, weight, bias)
    if x.ndim not in (4, 5):
        raise ShapeError(f"conv3d expects [C,S,H,W] or [B,C,S,H,W], got {x.ndim} dims")
    batched = x.ndim == 5
    xb = x.data if batched else x.data[None]
    b_n, ci, s, h, w = xb.shape
    if weight.ndim != 5 or weight.shape[1] != ci:
        raise ShapeError(f"conv3d weight {weight.shape} incompatible with {ci} channels")
    co, _, k1, k2, k3 = weight.shape
    if not (k1 == k2 == k3) or k1 % 2 == 0:
        raise ShapeError(f"conv3d kernel must be cubic and odd, got {weight.shape[2:]}")
    k = k1
    pad = k // 2
    if bias.shape != (co,):
        raise ShapeError(f"conv3d bias shape {bias.shape} != ({co},)")
    if pad > min(s, h, w):
        raise ShapeError(
            f"conv3d pad {pad} exceeds an input extent {(s, h, w)}; kernel too large"
        )
    padded = np.pad(xb, ((0, 0), (0, 0)) + ((pad, pad),) * 3, mode="symmetric")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k, k), axis=(2, 3, 4))
    # win: [B, Ci, S, H, W, k, k, k] (view)
    arr = np.tensordot(win, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    arr = np.ascontiguousarray(np.moveaxis(arr, -1, 1))
    arr += bias.data[None, :, None, None, None]
    if not batched:
        arr = arr[0]
    out = _result(arr, "conv3d")

    def vjp(g):
        gb = g if batched else g[None]
        db = gb.sum(axis=(0, 2, 3, 4))
        dw = np.tensordot(gb, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        # dw axes: [Co, Ci, k, k, k] already in order
        dpad = np.zeros_like(padded)
        for a in range(k):
            for b2 in range(k):
                for c in range(k):
                    contrib = np.einsum(
                        "boshw,oc->bcshw", gb, weight.data[:, :, a, b2, c], optimize=True
                    )
                    dpad[:, :, a : a + s, b2 : b2 + h, c : c + w] += contrib
        dx = _fold_symmetric(dpad, pad, axes=(2, 3, 4))
        if not batched:
            dx = dx[0]
        return dx, dw, db

    _record(out, (x, weight, bias), vjp)
    return out


def _fold_symmetric(padded_grad: np.ndarray, pad: int, axes) -> np.ndarray:
    """Adjoint of numpy symmetric padding: fold border gradients onto sources."""
    if pad == 0:
        return padded_grad
    grad = padded_grad
    for axis in axes:
        n = grad.shape[axis] - 2 * pad
        core = [slice(None)] * grad.ndim
        core[axis] = slice(pad, pad + n)
        folded = grad[tuple(core)].copy()
        for j in range(pad):
            src = [slice(None)] * grad.ndim
            dst = [slice(None)] * grad.ndim
            # leading border: padded index pad-1-j mirrors source j
            src[axis] = slice(pad - 1 - j, pad - j)
            dst[axis] = slice(j, j + 1)
            folded[tuple(dst)] += grad[tuple(src)]
            # trailing border: padded index pad+n+j mirrors source n-1-j
            src[axis] = slice(pad + n + j, pad + n + j + 1)
            dst[axis] = slice(n - 1 - j, n - j)
            folded[tuple(dst)] += grad[tuple(src)]
        grad = folded
    return grad


# ---------------------------------------------------------------------------
# resampling and pooling


_AXIS_MATRICES: dict = {}
_AXIS_LOCK = threading.Lock()


def _axis_matrix(n: int, mode: str, dtype) -> np.ndarray:
    """Interpolation matrix applied along one axis.

    ``down2``: [n/2, n] block mean of neighbouring pairs.
    ``up2``: [2n, n] linear interpolation at half-pixel-aligned centres
    (output pixel i' reads source position i'/2 - 0.25, clamped).
    """
    key = (n, mode, np.dtype(dtype).str)
    with _AXIS_LOCK:
        cached = _AXIS_MATRICES.get(key)
        if cached is not None:
            return cached
        if mode == "down2":
            m = np.zeros((n // 2, n), dtype=np.float64)
            for i in range(n // 2):
                m[i, 2 * i] = 0.5
                m[i, 2 * i + 1] = 0.5
        elif mode == "up2":
            m = np.zeros((2 * n, n), dtype=np.float64)
            for i in range(2 * n):
                srcf = i / 2.0 - 0.25
                srcf = min(max(srcf, 0.0), n - 1.0)
                lo = int(np.floor(srcf))
                hi = min(lo + 1, n - 1)
                frac = srcf - lo
                m[i, lo] += 1.0 - frac
                m[i, hi] += frac
        else:
            raise ShapeError(f"unknown resize mode {mode!r}")
        m = m.astype(dtype)
        _AXIS_MATRICES[key] = m
        return m


def resize_by_factor(x: Tensor, mode: str) -> Tensor:
    """Halve (area mean) or double (bilinear) the last two axes.

    mode: 'down2' or 'up2'. down2 requires even extents.
    """
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"resize_by_factor needs at least 2 dims, got {x.ndim}")
    h, w = x.shape[-2], x.shape[-1]
    if mode == "down2" and (h % 2 or w % 2):
        raise ShapeError(f"down2 requires even extents, got {h}x{w}")
    if mode not in ("down2", "up2"):
        raise ShapeError(f"unknown resize mode {mode!r}")
    mh = _axis_matrix(h, mode, x.dtype)
    mw = _axis_matrix(w, mode, x.dtype)
    arr = np.matmul(np.matmul(mh, x.data), mw.T)
    out = _result(arr, "resize_by_factor")

    def vjp(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    _record(out, (x,), vjp)
    return out


def pool3d(x: Tensor, window, stride=None, kind: str = "max") -> Tensor:
    """Sliding 3D pooling over the trailing (S, H, W) axes.

    x: [C,S,H,W] or [B,C,S,H,W]. window/stride: int or 3-tuple; stride
    defaults to window. kind: 'max' or 'avg'.
    """
    x = _as_tensor(x)
    if x.ndim not in (4, 5):
        raise ShapeError(f"pool3d expects 4D or 5D input, got {x.ndim} dims")
    if kind not in ("max", "avg"):
        raise ShapeError(f"pool3d kind must be 'max' or 'avg', got {kind!r}")
    win = (window,) * 3 if isinstance(window, int) else tuple(int(v) for v in window)
    strides = win if stride is None else (
        (stride,) * 3 if isinstance(stride, int) else tuple(int(v) for v in stride)
    )
    if len(win) != 3 or len(strides) != 3:
        raise ShapeError("pool3d window and stride must be scalars or 3-tuples")
    batched = x.ndim == 5
    xb = x.data if batched else x.data[None]
    extents = xb.shape[2:]
    for size, ext in zip(win, extents):
        if size < 1 or size > ext:
            raise ShapeError(f"pool3d window {win} does not fit extents {extents}")
    if any(s < 1 for s in strides):
        raise ShapeError(f"pool3d stride must be positive, got {strides}")

    view = np.lib.stride_tricks.sliding_window_view(xb, win, axis=(2, 3, 4))
    view = view[:, :, :: strides[0], :: strides[1], :: strides[2]]
    b_n, c = xb.shape[:2]
    so, ho, wo = view.shape[2:5]
    tsize = win[0] * win[1] * win[2]

    if kind == "avg":
        arr = view.mean(axis=(5, 6, 7))
        out_arr = arr if batched else arr[0]
        out = _result(np.ascontiguousarray(out_arr), "pool3d")

        def vjp(g):
            gb = g if batched else g[None]
            dx = np.zeros_like(xb)
            share = gb / tsize
            for a in range(win[0]):
                for b2 in range(win[1]):
                    for c2 in range(win[2]):
                        dx[
                            :, :,
                            a : a + so * strides[0] : strides[0],
                            b2 : b2 + ho * strides[1] : strides[1],
                            c2 : c2 + wo * strides[2] : strides[2],
                        ] += share
            return (dx if batched else dx[0],)

    else:
        flat = view.reshape(b_n, c, so, ho, wo, tsize)
        arg = flat.argmax(axis=-1)
        arr = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        out_arr = arr if batched else arr[0]
        out = _result(np.ascontiguousarray(out_arr), "pool3d")

        # absolute source indices of each window's argmax
        a_off, rem = np.divmod(arg, win[1] * win[2])
        b_off, c_off = np.divmod(rem, win[2])
        s_idx = np.arange(so)[None, None, :, None, None] * strides[0] + a_off
        h_idx = np.arange(ho)[None, None, None, :, None] * strides[1] + b_off
        w_idx = np.arange(wo)[None, None, None, None, :] * strides[2] + c_off

        def vjp(g):
            gb = g if batched else g[None]
            dx = np.zeros_like(xb)
            bi = np.arange(b_n)[:, None, None, None, None]
            cI = np.arange(c)[None, :, None, None, None]
            np.add.at(dx, (bi, cI, s_idx, h_idx, w_idx), gb)
            return (dx if batched else dx[0],)

    _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    momentum: float = 0.9,
    eps: float = 1e-5,
    train: bool,
) -> Tensor:
    """Per-channel normalization; channel axis is 1.

    Training mode uses biased batch statistics and updates the running
    buffers in place (new = momentum * old + (1 - momentum) * batch).
    Inference mode reads the buffers and touches nothing.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    _dtype_of(x, gamma, beta)
    if x.ndim < 2:
        raise ShapeError(f"batch_norm needs a channel axis, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm scale/shift must be [{c}], got {gamma.shape}/{beta.shape}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm running buffers must be [{c}]")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)

    if train:
        if x.shape[0] < 2:
            raise ShapeError("batch_norm training mode needs batch size >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean[...] = momentum * running_mean + (1.0 - momentum) * mu
        running_var[...] = momentum * running_var + (1.0 - momentum) * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
        arr = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
        out = _result(arr, "batch_norm")
        m = x.size // c

        def vjp(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data.reshape(bshape)
            term = (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            dx = term * (inv.reshape(bshape) / m)
            return dx, dgamma, dbeta

    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
        arr = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
        out = _result(arr, "batch_norm")

        def vjp(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dx = g * (gamma.data.reshape(bshape) * inv.reshape(bshape))
            return dx, dgamma, dbeta

    _record(out, (x, gamma, beta), vjp)
    return out


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, seed=None, output: Tensor | None = None) -> dict:
    """Walk a tape in reverse, accumulating gradients into Parameter.grad.

    seed must match the shape of the differentiated output (defaults to
    1.0 for scalar outputs).  Returns {parameter name: gradient increment}
    for the parameters this pass touched.
    """
    if not isinstance(tape, Tape):
        raise TypeError("backward expects a Tape")
    if tape._consumed:
        raise TapeConsumedError("tape already consumed by a previous backward()")
    tape._consumed = True
    if output is None:
        output = tape.output
    if output is None:
        raise ShapeError("backward on an empty tape")
    if seed is None:
        if output.shape != ():
            raise ShapeError(
                f"seed required: tape output has shape {output.shape}, only scalars default to 1"
            )
        seed_arr = np.asarray(1.0, dtype=output.dtype)
    else:
        seed_arr = seed.data if isinstance(seed, Tensor) else np.asarray(seed, dtype=output.dtype)
        if seed_arr.shape != output.shape:
            raise ShapeError(f"seed shape {seed_arr.shape} != output shape {output.shape}")
        if seed_arr.dtype != output.dtype:
            seed_arr = seed_arr.astype(output.dtype)

    adjoint: dict[int, np.ndarray] = {id(output): seed_arr}
    touched: dict[int, Parameter] = {}
    for node in reversed(tape._nodes):
        g = adjoint.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.vjp(g)
        if len(grads) != len(node.inputs):
            raise RuntimeError("op returned wrong gradient count")
        for inp, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if gi.shape != inp.data.shape:
                raise ShapeError(
                    f"gradient shape {gi.shape} != input shape {inp.data.shape}"
                )
            key = id(inp)
            if isinstance(inp, Parameter):
                touched[key] = inp
            held = adjoint.get(key)
            adjoint[key] = gi if held is None else held + gi

    increments: dict[str, np.ndarray] = {}
    for key, param in touched.items():
        inc = adjoint.pop(key, None)
        if inc is None:
            continue
        param.grad += inc
        if param.name in increments:
            increments[param.name] = increments[param.name] + inc
        else:
            increments[param.name] = inc
    return increments
