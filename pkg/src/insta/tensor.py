"""Dense float64 tensor engine with reverse-mode autodiff.

Each operation records its input tensors and a backward closure; calling
``backward()`` on a scalar result runs reverse accumulation over the
recorded graph and sums gradients into per-tensor ``grad`` buffers.
Data lives in row-major numpy arrays and is never mutated by an op, so
tensors behave as immutable values. Finite differences are available as
an independent oracle through :func:`grad_check`; they are never used as
a runtime differentiation mechanism.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "BNState",
    "ShapeError",
    "NumericError",
    "no_grad",
    "add",
    "hadamard",
    "relu",
    "reshape",
    "transpose",
    "broadcast",
    "mean_over_tail",
    "linear",
    "matmul",
    "conv1x1",
    "conv1x1_batch",
    "unfold",
    "unfold_batch",
    "batch_norm",
    "conv2d_same",
    "maxpool2x2",
    "stack",
    "concat",
    "narrow",
    "sorted_sum",
    "cross_entropy",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract forbids one."""


_grad_enabled = contextvars.ContextVar("insta_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping ------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, gradient: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if gradient is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            gradient = np.ones_like(self.data)
        else:
            gradient = np.ascontiguousarray(gradient, dtype=np.float64)
            if gradient.shape != self.data.shape:
                raise ShapeError("gradient shape must match tensor shape")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        _accumulate(self, gradient)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return hadamard(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return hadamard(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims: bool = False):
        return _reduce(self, axis, keepdims, mean=True)


# ---------------------------------------------------------------------------
# graph plumbing


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    requires = _grad_enabled.get() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _from_op(data, (a, b), backward)


def hadamard(a, b) -> Tensor:
    """Elementwise product (numpy broadcasting rules apply)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"hadamard: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(data, (a, b), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        _accumulate(x, g * (x.data > 0.0))

    return _from_op(data, (x,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from exc

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _from_op(data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _from_op(data, (x,), backward)


def broadcast(x: Tensor, axes) -> Tensor:
    """Insert new axes of given sizes and tile the tensor along them.

    ``axes`` is an iterable of ``(position, size)`` pairs where positions are
    indices into the result shape. Example: a (c,k,k) tensor with
    ``axes=[(1, h), (2, w)]`` becomes (c,h,w,k,k) with the original values
    repeated along the new spatial axes.
    """
    x = _as_tensor(x)
    pairs = sorted((int(p), int(s)) for p, s in axes)
    if not pairs:
        raise ValueError("broadcast: need at least one (position, size) pair")
    out_ndim = x.ndim + len(pairs)
    positions = [p for p, _ in pairs]
    if len(set(positions)) != len(positions):
        raise ValueError("broadcast: duplicate positions")
    if positions[0] < 0 or positions[-1] >= out_ndim:
        raise ShapeError(f"broadcast: position out of range for result rank {out_ndim}")
    if any(s < 1 for _, s in pairs):
        raise ValueError("broadcast: sizes must be positive")

    expanded = x.data
    for pos, _ in pairs:
        expanded = np.expand_dims(expanded, pos)
    target = list(expanded.shape)
    for pos, size in pairs:
        target[pos] = size
    data = np.ascontiguousarray(np.broadcast_to(expanded, target))
    axis_tuple = tuple(positions)

    def backward(g):
        _accumulate(x, g.sum(axis=axis_tuple))

    return _from_op(data, (x,), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``x[..., start:start+length, ...]`` along ``axis``."""
    x = _as_tensor(x)
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for rank {x.ndim}")
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: window [{start},{start + length}) exceeds extent {x.shape[axis]}")
    index = (slice(None),) * axis + (slice(start, start + length),)
    data = np.ascontiguousarray(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accumulate(x, full)

    return _from_op(data, (x,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack: empty list")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError("stack: all tensors must share one shape")
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _from_op(data, tuple(tensors), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat: incompatible shapes") from exc
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for i, t in enumerate(tensors):
            index = (slice(None),) * axis + (slice(offsets[i], offsets[i + 1]),)
            _accumulate(t, g[index])

    return _from_op(data, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _reduce(x: Tensor, axis, keepdims: bool, mean: bool) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    data = x.data.sum(axis=axes, keepdims=keepdims)
    if mean:
        data = data / count
    scale = 1.0 / count if mean else 1.0

    def backward(g):
        if not keepdims:
            expanded = np.expand_dims(g, axes) if axes else g
        else:
            expanded = g
        _accumulate(x, np.broadcast_to(expanded * scale, x.data.shape))

    return _from_op(data, (x,), backward)


def mean_over_tail(x: Tensor, tail_rank: int) -> Tensor:
    """Average over the trailing ``tail_rank`` axes (e.g. the k x k taps)."""
    x = _as_tensor(x)
    if not 1 <= tail_rank < x.ndim:
        raise ShapeError(f"mean_over_tail: tail_rank {tail_rank} invalid for rank {x.ndim}")
    return _reduce(x, tuple(range(x.ndim - tail_rank, x.ndim)), keepdims=False, mean=True)


def sorted_sum(x: Tensor, axis: int = 0) -> Tensor:
    """Sum along an axis with value-sorted fold order.

    The addends at each output position are sorted before the fold, so the
    result is bit-identical under any permutation of the summed axis. Used
    for set-style aggregation where permutation invariance must be exact.
    """
    x = _as_tensor(x)
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"sorted_sum: axis {axis} out of range for rank {x.ndim}")
    data = np.add.reduce(np.sort(x.data, axis=axis), axis=axis)

    def backward(g):
        _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _from_op(data, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _from_op(data, (a, b), backward)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w.T + bias`` with ``w`` of shape (out, in)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape} with w {w.shape}")
    data = x.data @ w.data.T
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} with w {w.shape}")
        data = data + bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        _accumulate(x, g @ w.data)
        _accumulate(w, g.T @ x.data)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    return _from_op(data, parents, backward)


# ---------------------------------------------------------------------------
# convolution-shaped ops


def _unfold_core(data: np.ndarray, k: int) -> np.ndarray:
    pad = (k - 1) // 2
    lead = data.shape[:-2]
    h, w = data.shape[-2], data.shape[-1]
    padded = np.zeros(lead + (h + 2 * pad, w + 2 * pad), dtype=np.float64)
    padded[..., pad:pad + h, pad:pad + w] = data
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, (k, k), axis=(data.ndim - 2, data.ndim - 1)
    )
    return np.ascontiguousarray(windows)


def _unfold_backward(g: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    pad = (k - 1) // 2
    h, w = shape[-2], shape[-1]
    full = np.zeros(shape[:-2] + (h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            full[..., i:i + h, j:j + w] += g[..., i, j]
    return full[..., pad:pad + h, pad:pad + w]


def _check_odd_kernel(k) -> int:
    if not isinstance(k, (int, np.integer)):
        raise ValueError(f"kernel extent must be an integer, got {k!r}")
    k = int(k)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel extent must be odd and positive, got {k}")
    return k


def unfold(s: Tensor, k: int) -> Tensor:
    """Zero-padded sliding windows: (c,h,w) -> (c,h,w,k,k).

    ``out[ch,a,b,p,q] == s[ch, a+p-(k-1)/2, b+q-(k-1)/2]`` with zeros
    outside the map, so the spatial extent is preserved.
    """
    k = _check_odd_kernel(k)
    s = _as_tensor(s)
    if s.ndim != 3:
        raise ShapeError(f"unfold: expected rank-3 input, got rank {s.ndim}")
    data = _unfold_core(s.data, k)

    def backward(g):
        _accumulate(s, _unfold_backward(g, s.data.shape, k))

    return _from_op(data, (s,), backward)


def unfold_batch(x: Tensor, k: int) -> Tensor:
    """Batched variant of :func:`unfold`: (b,c,h,w) -> (b,c,h,w,k,k)."""
    k = _check_odd_kernel(k)
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"unfold_batch: expected rank-4 input, got rank {x.ndim}")
    data = _unfold_core(x.data, k)

    def backward(g):
        _accumulate(x, _unfold_backward(g, x.data.shape, k))

    return _from_op(data, (x,), backward)


def conv1x1(s: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Pointwise convolution on a single map: (c_in,h,w) -> (c_out,h,w)."""
    s, w, bias = _as_tensor(s), _as_tensor(w), _as_tensor(bias)
    if s.ndim != 3 or w.ndim != 2:
        raise ShapeError(f"conv1x1: map rank {s.ndim}, weight rank {w.ndim}")
    if w.shape[1] != s.shape[0] or bias.shape != (w.shape[0],):
        raise ShapeError(f"conv1x1: map {s.shape}, weight {w.shape}, bias {bias.shape}")
    data = np.tensordot(w.data, s.data, axes=([1], [0])) + bias.data[:, None, None]

    def backward(g):
        _accumulate(w, np.tensordot(g, s.data, axes=([1, 2], [1, 2])))
        _accumulate(bias, g.sum(axis=(1, 2)))
        _accumulate(s, np.tensordot(w.data.T, g, axes=([1], [0])))

    return _from_op(data, (s, w, bias), backward)


def conv1x1_batch(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Pointwise convolution over a batch: (b,c_in,h,w) -> (b,c_out,h,w)."""
    x, w, bias = _as_tensor(x), _as_tensor(w), _as_tensor(bias)
    if x.ndim != 4 or w.ndim != 2:
        raise ShapeError(f"conv1x1_batch: input rank {x.ndim}, weight rank {w.ndim}")
    if w.shape[1] != x.shape[1] or bias.shape != (w.shape[0],):
        raise ShapeError(f"conv1x1_batch: input {x.shape}, weight {w.shape}, bias {bias.shape}")
    b, ci, h, wd = x.shape
    co = w.shape[0]
    xm = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, ci)
    om = xm @ w.data.T + bias.data
    data = np.ascontiguousarray(om.reshape(b, h, wd, co).transpose(0, 3, 1, 2))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
        _accumulate(w, gm.T @ xm)
        _accumulate(bias, gm.sum(axis=0))
        dxm = gm @ w.data
        _accumulate(x, dxm.reshape(b, h, wd, ci).transpose(0, 3, 1, 2))

    return _from_op(data, (x, w, bias), backward)


def conv2d_same(x: Tensor, w: Tensor) -> Tensor:
    """Stride-1 odd-kernel convolution with zero padding, no bias.

    ``x`` is (b,c_in,H,W); ``w`` is (c_out,c_in,k,k); output is (b,c_out,H,W).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d_same: input {x.shape}, weight {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d_same: channel mismatch {x.shape} vs {w.shape}")
    k = _check_odd_kernel(w.shape[2])
    b, ci, hh, ww = x.shape
    co = w.shape[0]
    windows = _unfold_core(x.data, k)  # (b,ci,H,W,k,k)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, ci * k * k)
    wmat = w.data.reshape(co, -1)
    om = cols @ wmat.T
    data = np.ascontiguousarray(om.reshape(b, hh, ww, co).transpose(0, 3, 1, 2))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
        _accumulate(w, (gm.T @ cols).reshape(w.data.shape))
        dcols = (gm @ wmat).reshape(b, hh, ww, ci, k, k)
        pad = (k - 1) // 2
        dpad = np.zeros((b, ci, hh + 2 * pad, ww + 2 * pad), dtype=np.float64)
        for i in range(k):
            for j in range(k):
                dpad[:, :, i:i + hh, j:j + ww] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        _accumulate(x, dpad[:, :, pad:pad + hh, pad:pad + ww])

    return _from_op(data, (x, w), backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; spatial extents must be even."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2: expected rank-4 input, got rank {x.ndim}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial extents must be even, got {h}x{w}")
    tiles = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    tiles = np.ascontiguousarray(tiles).reshape(b, c, h // 2, w // 2, 4)
    idx = tiles.argmax(axis=-1)
    data = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        fan = np.zeros_like(tiles)
        np.put_along_axis(fan, idx[..., None], g[..., None], axis=-1)
        back = fan.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        _accumulate(x, back.reshape(b, c, h, w))

    return _from_op(data, (x,), backward)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BNState:
    """Batch-norm parameters plus running statistics.

    Axis 1 of the normalized tensor is the channel axis; statistics are
    taken over all remaining axes. ``mode`` selects batch statistics
    ("train", which also updates the running buffers in place) or the
    stored running statistics ("eval").
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0,1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var entries must be nonnegative")

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5,
               affine: bool = True) -> "BNState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=affine),
            beta=Tensor(np.zeros(channels), requires_grad=affine),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> "BNState":
        clone = BNState(
            gamma=Tensor(self.gamma.data.copy(), requires_grad=self.gamma.requires_grad),
            beta=Tensor(self.beta.data.copy(), requires_grad=self.beta.requires_grad),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            momentum=self.momentum,
            epsilon=self.epsilon,
        )
        clone.mode = self.mode
        return clone


def batch_norm(x: Tensor, state: BNState) -> Tensor:
    """Normalize per channel over all non-channel axes, then scale/shift."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"batch_norm: need rank >= 2, got rank {x.ndim}")
    if x.shape[1] != state.channels:
        raise ShapeError(f"batch_norm: {x.shape[1]} channels vs state {state.channels}")
    if x.shape[0] == 0:
        raise ValueError("batch_norm: empty batch")
    if state.mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: unknown mode {state.mode!r}")

    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, state.channels) + (1,) * (x.ndim - 2)
    if state.mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    data = state.gamma.data.reshape(bshape) * xhat + state.beta.data.reshape(bshape)
    train_stats = state.mode == "train"
    gamma, beta = state.gamma, state.beta

    def backward(g):
        _accumulate(beta, g.sum(axis=axes))
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        dxhat = g * gamma.data.reshape(bshape)
        if train_stats:
            dx = inv.reshape(bshape) * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        _accumulate(x, dx)

    return _from_op(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) rows against integer labels."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be rank 2, got {logits.shape}")
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} for {n} rows")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("cross_entropy: labels must be integers")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ValueError(f"cross_entropy: label out of range [0,{classes})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    data = np.asarray(-logp[rows, labels].mean())

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        _accumulate(logits, p * (float(g) / n))

    return _from_op(data, (logits,), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central
    differences; returns the max of |analytic - numeric| / max(1, |analytic|).

    ``f`` must be a pure function of its tensor argument. Finite differences
    are the oracle here; the analytic path is what gets verified.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-4]")
    base = _as_tensor(x)
    probe = Tensor(base.data.copy(), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check: f must return a scalar Tensor")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: non-finite function value at base point")
    out.backward()
    analytic = (probe.grad if probe.grad is not None else np.zeros_like(base.data)).ravel()

    flat = base.data.ravel()
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + eps
            fp = f(Tensor(bumped.reshape(base.shape))).item()
            bumped[i] = flat[i] - eps
            fm = f(Tensor(bumped.reshape(base.shape))).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite value at coordinate {i}")
            numeric[i] = (fp - fm) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
