"""Dense float64 tensors with a minimal reverse-mode tape.

A :class:`Tape` is opened around one forward pass. Inputs registered with
:meth:`Tape.watch` (and everything computed from them while the tape is
active) are recorded; :meth:`Tape.gradient` then walks the recorded nodes in
reverse order exactly once and returns vector-Jacobian products.

Example::

    x = Tensor([3.0])
    with Tape() as tape:
        tape.watch(x)
        y = (x * x).sum()
    tape.gradient(y, x)   # Tensor([6.])
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, ShapeError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "no_record",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "affine",
    "tanh",
    "gelu",
    "sigmoid",
    "softplus",
    "square",
    "tensor_sum",
    "tensor_mean",
    "squared_l2",
    "reshape",
    "concat",
    "avg_pool2d",
    "conv2d",
    "masked",
    "tap",
]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense row-major array of 64-bit reals.

    Constructing a Tensor from external data copies it and rejects NaN/Inf.
    Tensors produced by operations skip that check so that divergence can be
    detected downstream with :meth:`all_finite`.
    """

    __slots__ = ("data",)
    __array_priority__ = 1000

    def __init__(self, data, *, check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise ContractViolation("tensor data contains NaN or Inf")
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = object.__new__(cls)
        out.data = np.asarray(arr, dtype=np.float64)
        return out

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._wrap(np.zeros(shape))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        return f"Tensor({np.array2string(self.data, precision=6)})"

    def __len__(self) -> int:
        return len(self.data)

    # operators route through the recorded functions below
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records operations on watched tensors for one reverse pass.

    A tape may be consumed by a single :meth:`gradient` call; it is meant to be
    created per forward pass and then thrown away.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._tracked: dict[int, Tensor] = {}
        self._recording = True
        self._spent = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise ContractViolation("only Tensor objects can be watched")
            self._tracked[id(t)] = t

    def tracks(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tracked

    @property
    def recording(self) -> bool:
        return self._recording

    @contextlib.contextmanager
    def paused(self):
        prev = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = prev

    def _maybe_record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        if not self._recording:
            return
        if any(id(i) in self._tracked for i in inputs):
            self._nodes.append(_Node(out, inputs, backward))
            self._tracked[id(out)] = out

    def gradient(self, root: Tensor, wrt):
        """Return d(root)/d(wrt); ``wrt`` may be one tensor or a sequence."""
        if self._spent:
            raise TapeError("tape already consumed by a previous gradient call")
        if not isinstance(root, Tensor) or root.size != 1:
            shape = root.shape if isinstance(root, Tensor) else type(root).__name__
            raise ContractViolation(f"gradient root must be a scalar tensor, got {shape}")
        single = isinstance(wrt, Tensor)
        targets = [wrt] if single else list(wrt)
        if id(root) not in self._tracked:
            raise TapeError("root was not recorded on this tape (recording off or no watched input)")
        for t in targets:
            if not self.tracks(t):
                raise TapeError(f"tensor of shape {t.shape} is not on the tape")

        wanted = {id(t) for t in targets}
        found: dict[int, np.ndarray] = {}
        adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self._nodes):
            key = id(node.out)
            g = adj.pop(key, None)
            if g is None:
                continue
            if key in wanted:
                found[key] = g
            needs = [id(i) in self._tracked for i in node.inputs]
            grads = node.backward(g, needs)
            for inp, gi, need in zip(node.inputs, grads, needs):
                if not need or gi is None:
                    continue
                k = id(inp)
                adj[k] = adj[k] + gi if k in adj else gi
        for k, g in adj.items():
            if k in wanted:
                found[k] = g
        self._spent = True
        self._nodes = []
        result = [
            Tensor._wrap(found[id(t)].reshape(t.shape)) if id(t) in found else Tensor.zeros(t.shape)
            for t in targets
        ]
        self._tracked = {}
        return result[0] if single else result


@contextlib.contextmanager
def no_record():
    """Suspend recording on the active tape, if any."""
    tape = _active_tape()
    if tape is None:
        yield
        return
    with tape.paused():
        yield


def _emit(arr: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None:
        tape._maybe_record(out, inputs, backward)
    return out


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None)

    return _emit(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (
            _unbroadcast(g * bd, ad.shape) if needs[0] else None,
            _unbroadcast(g * ad, bd.shape) if needs[1] else None,
        )

    return _emit(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("div", a, b)
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (
            _unbroadcast(g / bd, ad.shape) if needs[0] else None,
            _unbroadcast(-g * ad / (bd * bd), bd.shape) if needs[1] else None,
        )

    return _emit(ad / bd, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g, needs: (-g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _emit(ad * ad, (a,), lambda g, needs: (2.0 * ad * g,))


def masked(x, mask) -> Tensor:
    """Elementwise product with a constant mask; the mask gets no gradient."""
    x = _as_tensor(x)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    try:
        np.broadcast_shapes(x.shape, m.shape)
    except ValueError:
        raise ShapeError("masked", x.shape, m.shape) from None
    return _emit(x.data * m, (x,), lambda g, needs: (_unbroadcast(g * m, x.shape),))


# ------------------------------------------------------------ nonlinearities


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g, needs: (g * (1.0 - y * y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """GELU with the tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    th = np.tanh(_GELU_C * (xd + 0.044715 * xd * xd * xd))
    y = 0.5 * xd * (1.0 + th)

    def backward(g, needs):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return _emit(y, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(y, (x,), lambda g, needs: (g * y * (1.0 - y),))


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    y = np.logaddexp(0.0, x.data)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(y, (x,), lambda g, needs: (g * s,))


# --------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return _emit(ad @ bd, (a, b), backward)


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for a batch ``x`` of shape (B, n_in)."""
    x, w, b = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("affine", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError("affine", w.shape, b.shape)
    xd, wd = x.data, w.data

    def backward(g, needs):
        return (
            g @ wd.T if needs[0] else None,
            xd.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return _emit(xd @ wd + b.data, (x, w, b), backward)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def backward(g, needs):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _emit(x.data.sum(axis=axes), (x,), backward)


def tensor_mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def backward(g, needs):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / count,)

    return _emit(x.data.mean(axis=axes), (x,), backward)


def squared_l2(x, axis=None) -> Tensor:
    """Sum of squares over ``axis`` (all axes by default)."""
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    xd = x.data

    def backward(g, needs):
        return (2.0 * xd * np.expand_dims(g, axes),)

    return _emit((xd * xd).sum(axis=axes), (x,), backward)


# ------------------------------------------------------------------- shaping


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    old = x.shape
    return _emit(y, (x,), lambda g, needs: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g, needs):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit(y, ts, backward)


def _getitem(x: Tensor, key) -> Tensor:
    y = x.data[key]
    shape = x.shape

    def backward(g, needs):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _emit(np.array(y, dtype=np.float64), (x,), backward)


# ------------------------------------------------------------------- imaging


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling over the last two axes."""
    x = _as_tensor(x)
    if x.ndim < 2 or k < 1 or x.shape[-1] % k or x.shape[-2] % k:
        raise ShapeError("avg_pool2d", x.shape, (k, k))
    *lead, h, w = x.shape
    y = x.data.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))

    def backward(g, needs):
        return (np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k),)

    return _emit(y, (x,), backward)


def conv2d(x, kernel) -> Tensor:
    """'Same'-size 2-D cross-correlation with a fixed odd-sized kernel and zero padding.

    The kernel is treated as a constant; only ``x`` receives gradients.
    """
    x = _as_tensor(x)
    kern = np.asarray(kernel.data if isinstance(kernel, Tensor) else kernel, dtype=np.float64)
    if x.ndim < 2 or kern.ndim != 2 or kern.shape[0] % 2 == 0 or kern.shape[1] % 2 == 0:
        raise ShapeError("conv2d", x.shape, kern.shape)
    kh, kw = kern.shape
    ph, pw = kh // 2, kw // 2
    *lead, h, w = x.shape
    pad = [(0, 0)] * len(lead) + [(ph, ph), (pw, pw)]
    xp = np.pad(x.data, pad)
    y = np.zeros(x.shape)
    for p in range(kh):
        for q in range(kw):
            y += kern[p, q] * xp[..., p : p + h, q : q + w]

    def backward(g, needs):
        gp = np.zeros(xp.shape)
        for p in range(kh):
            for q in range(kw):
                gp[..., p : p + h, q : q + w] += kern[p, q] * g
        return (gp[..., ph : ph + h, pw : pw + w],)

    return _emit(y, (x,), backward)


def tap(x, on_backward: Callable[[], None]) -> Tensor:
    """Identity op that calls ``on_backward`` when the reverse pass crosses it."""
    x = _as_tensor(x)

    def backward(g, needs):
        on_backward()
        return (g,)

    return _emit(x.data, (x,), backward)


def stack_params(params: Iterable[Tensor]) -> np.ndarray:
    """Concatenate parameter tensors into one flat vector (used in tests and checkpoints)."""
    return np.concatenate([p.flat() for p in params]) if params else np.zeros(0)
