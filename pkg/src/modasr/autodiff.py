"""Dense tensors with taped reverse-mode differentiation.

A deliberately small engine: tensors wrap numpy arrays, primitives record
themselves on a thread-local tape, and ``Tape.backward`` walks the records in
reverse. Compute is 32-bit by default; gradient checks run under
``precision("float64")`` because 32-bit central differences are too noisy.

Broadcasting is restricted to bias-add (a trailing-shape second operand).
Everything else requires explicit reshapes.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    NondeterministicFunctionError,
    NonFiniteError,
    ShapeError,
    TapeError,
    UnknownOpError,
)

_LOCAL = threading.local()

MASK_FILL_VALUE = -1e9  # large-but-finite stand-in for -inf in masked logits


def _state():
    if not hasattr(_LOCAL, "dtype"):
        _LOCAL.dtype = np.dtype(np.float32)
        _LOCAL.tape = None
    return _LOCAL


def default_dtype() -> np.dtype:
    return _state().dtype


class precision:
    """Context manager that switches the default float width.

    >>> with precision("float64"):
    ...     x = Tensor([1.0])
    """

    def __init__(self, dtype):
        self._dtype = np.dtype(dtype)
        self._prev = None

    def __enter__(self):
        st = _state()
        self._prev = st.dtype
        st.dtype = self._dtype
        return self

    def __exit__(self, *exc):
        _state().dtype = self._prev
        return False


class Tensor:
    """A dense n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(arr) -> Tensor:
    """Wrap an array as a non-differentiable tensor in its own dtype."""
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(arr)
    t.requires_grad = False
    t.grad = None
    return t


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Entries are appended in execution order, so every input of an entry was
    produced earlier or is a leaf; ``backward`` visits each entry exactly once
    in reverse order and accumulates gradients on ``requires_grad`` leaves.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._output_ids: set[int] = set()
        self._consumed = False
        self._prev = None

    def __len__(self):
        return len(self._entries)

    def __enter__(self):
        st = _state()
        self._prev = st.tape
        st.tape = self
        return self

    def __exit__(self, *exc):
        _state().tape = self._prev
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every reachable leaf with d(loss)/d(leaf)."""
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward()")
        if loss.ndim != 0:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._output_ids:
            raise TapeError("loss was not produced on this tape")
        loss.grad = np.ones((), dtype=loss.dtype)
        for out, inputs, bwd in reversed(self._entries):
            g = out.grad
            if g is None:
                continue
            for inp, gi in zip(inputs, bwd(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = gi
                else:
                    inp.grad = inp.grad + gi
        self._consumed = True
        self._entries.clear()
        self._output_ids.clear()


def active_tape() -> Tape | None:
    return _state().tape


def _check_finite(arr: np.ndarray, kind: str) -> np.ndarray:
    if arr.size and not np.isfinite(arr).all():
        raise NonFiniteError(f"primitive '{kind}' produced non-finite values")
    return arr


def _result(arr: np.ndarray, kind: str) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = _check_finite(arr, kind)
    t.requires_grad = False
    t.grad = None
    return t


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    tape = _state().tape
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape._entries.append((out, inputs, bwd))
        tape._output_ids.add(id(out))
    return out


def result_tensor(arr: np.ndarray, kind: str) -> Tensor:
    """Wrap a primitive's output array (finite-checked) for custom ops."""
    return _result(arr, kind)


def record(out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    """Register a custom primitive application on the active tape.

    ``bwd`` maps the output gradient to one gradient (or None) per input.
    """
    return _record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    ok = (
        (A.ndim == 2 and B.ndim == 2)
        or (A.ndim == 3 and B.ndim == 3 and A.shape[0] == B.shape[0])
        or (A.ndim == 3 and B.ndim == 2)
    )
    if not ok or A.shape[-1] != B.shape[-2 if B.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {A.shape} @ {B.shape}")
    out = _result(A @ B, "matmul")

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ B.swapaxes(-1, -2)
        if b.requires_grad:
            if A.ndim == 3 and B.ndim == 2:
                k = A.shape[-1]
                gb = A.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = A.swapaxes(-1, -2) @ g
        return ga, gb

    return _record(out, (a, b), bwd)


def _bias_reduce(g: np.ndarray, bias_shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(bias_shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    bias = B.ndim < A.ndim and A.shape[A.ndim - B.ndim:] == B.shape
    if not bias and A.shape != B.shape:
        raise ShapeError(
            f"add: shapes {A.shape} + {B.shape} (only exact or trailing bias-add allowed)"
        )
    out = _result(A + B, "add")

    def bwd(g):
        ga = g if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _bias_reduce(g, B.shape) if bias else g
        return ga, gb

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.shape != B.shape:
        raise ShapeError(f"elementwise-multiply: shapes {A.shape} * {B.shape}")
    out = _result(A * B, "elementwise-multiply")

    def bwd(g):
        return (g * B if a.requires_grad else None, g * A if b.requires_grad else None)

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _result(a.data * c, "scale")
    return _record(out, (a,), lambda g: (g * c,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: no operands")
    arrs = [p.data for p in parts]
    out = _result(np.concatenate(arrs, axis=axis), "concat")
    sizes = [a.shape[axis] for a in arrs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        gs = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                gs.append(g[tuple(idx)])
            else:
                gs.append(None)
        return gs

    return _record(out, tuple(parts), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = _result(x.data[idx], "slice")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record(out, (x,), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding-lookup: index out of range for table {table.shape}")
    out = _result(table.data[ids], "embedding-lookup")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer-normalization: gain/bias {gain.shape}/{bias.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(xhat * gain.data + bias.data, "layer-normalization")

    def bwd(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gy - m1 - xhat * m2)
        return gx, gg, gb

    return _record(out, (x, gain, bias), bwd)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _result(s, "softmax-over-last-axis")

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = _result(y, "log-softmax")

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), bwd)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = _result(s, "sigmoid")
    return _record(out, (x,), lambda g: (g * s * (1.0 - s),))


def logsigmoid(x: Tensor) -> Tensor:
    out = _result(-np.logaddexp(0.0, -x.data), "logsigmoid")
    return _record(out, (x,), lambda g: (g * _sigmoid(-x.data),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = _result(y, "tanh")
    return _record(out, (x,), lambda g: (g * (1.0 - y * y),))


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = _result(x.data * s, "swish")
    return _record(out, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def glu(x: Tensor) -> Tensor:
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"GLU: last axis must be even, got {d}")
    h = d // 2
    a, b = x.data[..., :h], x.data[..., h:]
    sb = _sigmoid(b)
    out = _result(a * sb, "GLU")

    def bwd(g):
        return (np.concatenate([g * sb, g * a * sb * (1.0 - sb)], axis=-1),)

    return _record(out, (x,), bwd)


def depthwise_conv1d(x: Tensor, w: Tensor, left: int, right: int) -> Tensor:
    """Per-channel 1-D convolution over the time axis of ``x`` [..., T, C].

    Tap ``k`` of ``w`` [K, C] multiplies the input at offset ``k - left``,
    so the output at time t depends only on inputs in [t-left, t+right];
    frames beyond either edge read as zeros.
    """
    if left < 0 or right < 0:
        raise ShapeError("depthwise-conv1d: negative context")
    K, C = w.shape
    if K != left + right + 1:
        raise ShapeError(f"depthwise-conv1d: kernel {K} != left {left} + right {right} + 1")
    if x.ndim < 2 or x.shape[-1] != C:
        raise ShapeError(f"depthwise-conv1d: input {x.shape} vs kernel {w.shape}")
    pad = [(0, 0)] * x.ndim
    pad[-2] = (left, right)
    xp = np.pad(x.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=-2)  # [..., T, C, K]
    out = _result(np.einsum("...tck,kc->...tc", win, w.data), "depthwise-conv1d")

    def bwd(g):
        gx = gw = None
        if x.requires_grad:
            gpad = [(0, 0)] * g.ndim
            gpad[-2] = (right, left)
            gwin = np.lib.stride_tricks.sliding_window_view(np.pad(g, gpad), K, axis=-2)
            gx = np.einsum("...tck,kc->...tc", gwin, w.data[::-1])
        if w.requires_grad:
            gw = np.einsum("mck,mc->kc", win.reshape(-1, C, K), g.reshape(-1, C))
        return gx, gw

    return _record(out, (x, w), bwd)


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_FILL_VALUE) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError as e:
        raise ShapeError(f"masked-fill: mask {mask.shape} vs data {x.shape}") from e
    out = _result(np.where(mask, np.asarray(value, dtype=x.dtype), x.data), "masked-fill")
    return _record(out, (x,), lambda g: (np.where(mask, 0.0, g),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = _result(x.data.transpose(axes), "transpose")
    inv = np.argsort(axes)
    return _record(out, (x,), lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _result(x.data.reshape(shape), "reshape")
    orig = x.shape
    return _record(out, (x,), lambda g: (g.reshape(orig),))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(x.data.sum(axis=axis, keepdims=keepdims), "reduce-sum")

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(x.data.mean(axis=axis, keepdims=keepdims), "reduce-mean")
    if axis is None:
        n = x.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in ax]))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _record(out, (x,), bwd)


def expand(x: Tensor, axis: int, reps: int) -> Tensor:
    """Insert a new axis of length ``reps`` (explicit stand-in for broadcasting)."""
    out = _result(np.repeat(np.expand_dims(x.data, axis), reps, axis=axis), "expand")
    return _record(out, (x,), lambda g: (g.sum(axis=axis),))


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "elementwise-multiply": mul,
    "scale": scale,
    "concat": concat,
    "slice": slice_axis,
    "embedding-lookup": embedding,
    "layer-normalization": layer_norm,
    "softmax-over-last-axis": softmax,
    "log-softmax": log_softmax,
    "sigmoid": sigmoid,
    "logsigmoid": logsigmoid,
    "tanh": tanh,
    "swish": swish,
    "GLU": glu,
    "depthwise-conv1d": depthwise_conv1d,
    "masked-fill": masked_fill,
    "transpose": transpose,
    "reshape": reshape,
    "reduce-sum": reduce_sum,
    "reduce-mean": reduce_mean,
    "expand": expand,
}


def apply_primitive(kind: str, operands: Iterable[Tensor], attrs: dict | None = None) -> Tensor:
    """Dispatch a primitive by name; mostly useful for generic test drivers."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise UnknownOpError(f"unknown primitive kind '{kind}'") from None
    operands = list(operands)
    attrs = attrs or {}
    if kind == "concat":
        return fn(operands, **attrs)
    return fn(*operands, **attrs)


def primitive_kinds() -> tuple[str, ...]:
    return tuple(_PRIMITIVES)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[..., float], params: Sequence[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient estimate of ``f(*params)`` per coordinate.

    ``f`` must be deterministic; it is evaluated twice at the base point and a
    mismatch raises :class:`NondeterministicFunctionError`. Parameters are
    perturbed in place and restored.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = float(f(*params))
    if float(f(*params)) != base:
        raise NondeterministicFunctionError("function value changed on repeated evaluation")
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.empty(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*params))
            flat[i] = orig - eps
            fm = float(f(*params))
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def grad_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest numeric-gradient magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(float(np.abs(n).max(initial=0.0)), 1e-6)
    return float(np.abs(a - n).max(initial=0.0)) / denom


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan: tuple[int, int] | None = None) -> np.ndarray:
    """Xavier-uniform sample with explicit or shape-derived fan-in/out."""
    if fan is None:
        if len(shape) < 2:
            raise ValueError("xavier_uniform needs a matrix shape or explicit fan")
        fan = (int(np.prod(shape[:-1])), shape[-1])
    limit = math.sqrt(6.0 / (fan[0] + fan[1]))
    return rng.uniform(-limit, limit, size=shape).astype(default_dtype())
