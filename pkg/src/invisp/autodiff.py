"""Dense tensors with define-by-run reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are recorded together with
their backward rules; :func:`backward` replays the tape in reverse. Outside a
tape, operations simply compute values (inference mode).

Storage is float32 by default. :func:`precision` switches the storage dtype,
which the finite-difference checks use to run in float64.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "Tensor",
    "Tape",
    "precision",
    "get_dtype",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "neg",
    "exp",
    "tanh",
    "sin",
    "relu",
    "clip",
    "power",
    "abs",
    "sum",
    "mean",
    "concat_channels",
    "split_channels",
    "pad_replicate",
    "crop",
    "matmul_2d",
    "inverse_2d",
    "conv2d",
    "transpose",
    "reshape",
    "hard_round",
    "custom_op",
    "backward",
    "AdamState",
    "adam_step",
    "numerical_gradient",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class TapeError(AutodiffError, RuntimeError):
    pass


_state = threading.local()


def get_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors."""
    previous = get_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


class Tensor:
    """N-dimensional float array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=get_dtype(), copy=True)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t.name = None
        return t

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; every operation whose inputs require gradients
    is appended while the tape is active. Records are appended in execution
    order, so the log is topologically sorted by construction.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor._wrap(np.asarray(data))
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, tuple(inputs), rule, op))
    return out


def custom_op(
    op: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Register a user-defined differentiable operation.

    ``rule`` maps the output gradient to one gradient per input (``None`` for
    inputs that need none).
    """
    return _emit(op, np.asarray(data, dtype=get_dtype()), inputs, rule)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# elementwise -----------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _emit("add", a.data + a.data.dtype.type(b), (a,), lambda g: (g,))
    b = _as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _emit("sub", a.data - a.data.dtype.type(b), (a,), lambda g: (g,))
    b = _as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product; a Python scalar falls through to :func:`scalar_mul`."""
    if _is_scalar(b):
        return scalar_mul(a, b)
    b = _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a: Tensor) -> Tensor:
    x = a.data
    return _emit("sin", np.sin(x), (a,), lambda g: (g * np.cos(x),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _emit("relu", np.maximum(x, 0), (a,), lambda g: (g * (x > 0),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _emit("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a scalar exponent."""
    x = a.data
    if not float(p).is_integer() and np.any(x < 0):
        raise ValueError("power: negative base with non-integer exponent")
    p = x.dtype.type(p)
    out = np.power(x, p)

    def rule(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x, p - 1)
        return (g * np.where(np.isfinite(d), d, 0),)

    return _emit("power", out, (a,), rule)


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = a.data
    return _emit("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


def hard_round(a: Tensor) -> Tensor:
    """True rounding (half to even). Gradient passes straight through."""
    return _emit("hard_round", np.rint(a.data), (a,), lambda g: (g,))


# reductions ------------------------------------------------------------------


def sum(a: Tensor) -> Tensor:  # noqa: A001
    total = np.sum(a.data, dtype=np.float64)
    shape, dtype = a.shape, a.dtype
    return _emit(
        "sum",
        np.asarray(total, dtype=dtype),
        (a,),
        lambda g: (np.full(shape, g, dtype=dtype),),
    )


def mean(a: Tensor) -> Tensor:
    # defined as sum / numel so the two reductions agree exactly
    n = a.size
    total = np.sum(a.data, dtype=np.float64)
    out = np.asarray(a.dtype.type(total) / a.dtype.type(n), dtype=a.dtype)
    shape, dtype = a.shape, a.dtype
    return _emit("mean", out, (a,), lambda g: (np.full(shape, g / n, dtype=dtype),))


# structural ------------------------------------------------------------------


def concat_channels(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: nothing to concatenate")
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(ref) or other[:axis] + other[axis + 1 :] != ref[:axis] + ref[axis + 1 :]:
            raise ShapeError(f"concat_channels: incompatible shapes {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _emit("concat", out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def split_channels(a: Tensor, index: int, axis: int = 1) -> tuple[Tensor, Tensor]:
    """Split into ``[:index]`` and ``[index:]`` along ``axis``."""
    c = a.shape[axis]
    if not 0 < index < c:
        raise ShapeError(f"split_channels: index {index} outside (0, {c})")
    first = np.take(a.data, np.arange(index), axis=axis)
    second = np.take(a.data, np.arange(index, c), axis=axis)
    shape, dtype = a.shape, a.dtype

    def rule_first(g):
        full = np.zeros(shape, dtype=dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = slice(0, index)
        full[tuple(sl)] = g
        return (full,)

    def rule_second(g):
        full = np.zeros(shape, dtype=dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = slice(index, c)
        full[tuple(sl)] = g
        return (full,)

    return _emit("split", first, (a,), rule_first), _emit("split", second, (a,), rule_second)


def pad_replicate(a: Tensor, bottom: int, right: int) -> Tensor:
    """Replicate the last row/column of an (..., H, W) tensor."""
    if bottom < 0 or right < 0:
        raise ShapeError("pad_replicate: negative padding")
    if bottom == 0 and right == 0:
        return _emit("pad", a.data.copy(), (a,), lambda g: (g,))
    pad = [(0, 0)] * (a.ndim - 2) + [(0, bottom), (0, right)]
    out = np.pad(a.data, pad, mode="edge")
    h, w = a.shape[-2:]

    def rule(g):
        g = g.copy()
        if right:
            g[..., :, w - 1] += g[..., :, w:].sum(axis=-1)
        if bottom:
            g[..., h - 1, :] += g[..., h:, :].sum(axis=-2)
        return (g[..., :h, :w],)

    return _emit("pad", out, (a,), rule)


def crop(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    h, w = a.shape[-2:]
    if top < 0 or left < 0 or top + height > h or left + width > w or height <= 0 or width <= 0:
        raise ShapeError(f"crop: window ({top},{left},{height},{width}) outside {h}x{w}")
    out = a.data[..., top : top + height, left : left + width].copy()
    shape, dtype = a.shape, a.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., top : top + height, left : left + width] = g
        return (full,)

    return _emit("crop", out, (a,), rule)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def cast(a: Tensor, dtype) -> Tensor:
    """Change storage precision; the gradient is cast back to the source dtype."""
    src = a.dtype
    return _emit("cast", a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


# linear algebra --------------------------------------------------------------


def matmul_2d(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul_2d: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def inverse_2d(a: Tensor, min_abs_det: float = 0.0) -> Tensor:
    """Matrix inverse; raises :class:`ShapeError` for non-square input."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"inverse_2d: need a square matrix, got {a.shape}")
    det = np.linalg.det(a.data.astype(np.float64))
    if not np.abs(det) > min_abs_det:
        raise np.linalg.LinAlgError(f"matrix is near-singular (|det|={np.abs(det):.3g})")
    inv = np.linalg.inv(a.data.astype(np.float64)).astype(a.dtype)
    return _emit("inverse", inv, (a,), lambda g: (-(inv.T @ g @ inv.T),))


def _flat_padded(x: np.ndarray, pad: int, k: int) -> tuple[np.ndarray, int]:
    # zero-pad and flatten H,W; one extra bottom row keeps every shifted
    # window of length H_out * row inside the buffer
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad + 1, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp.reshape(n, c, -1), w + 2 * pad


_CONV_CHUNK_BYTES = 64 << 20


def _shifted_columns(flat: np.ndarray, row: int, k: int, span: int) -> np.ndarray:
    """Stack the k*k shifted windows of flattened padded planes: (n, k*k*c, span)."""
    return np.concatenate(
        [flat[:, :, i * row + j : i * row + j + span] for i in range(k) for j in range(k)], axis=1
    )


def _conv_raw(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    if k == 1 and pad == 0:
        return np.matmul(w[:, :, 0, 0], x.reshape(n, c, h * wd)).reshape(n, co, h, wd)
    flat, row = _flat_padded(x, pad, k)
    span = ho * row
    dtype = np.result_type(x, w)
    if c <= co:
        # few input channels: one GEMM over all taps beats k*k thin products
        taps = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(co, k * k * c)
        out = np.empty((n, co, span), dtype=dtype)
        step = max(1, _CONV_CHUNK_BYTES // (k * k * c * span * flat.itemsize))
        for b in range(0, n, step):
            out[b : b + step] = np.matmul(taps, _shifted_columns(flat[b : b + step], row, k, span))
    else:
        # few output channels: accumulate one product per tap, no copies
        out = np.zeros((n, co, span), dtype=dtype)
        taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
        for b in range(n):
            for i in range(k):
                for j in range(k):
                    off = i * row + j
                    out[b] += taps[i, j] @ flat[b, :, off : off + span]
    return out.reshape(n, co, ho, row)[:, :, :, :wo]


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, pad: int) -> np.ndarray:
    n, c = x.shape[:2]
    co, ho, wo = g.shape[1:]
    flat, row = _flat_padded(x, pad, k)
    span = ho * row
    gfull = np.zeros((n, co, ho, row), dtype=g.dtype)
    gfull[:, :, :, :wo] = g
    gfull = gfull.reshape(n, co, span)
    gw = np.zeros((co, k * k * c), dtype=np.result_type(x, g))
    per_image = k * k * c * span * flat.itemsize
    step = max(1, _CONV_CHUNK_BYTES // max(per_image, 1))
    for b in range(0, n, step):
        cols = _shifted_columns(flat[b : b + step], row, k, span)
        gw += np.einsum("nos,nts->ot", gfull[b : b + step], cols, optimize=True)
    return gw.reshape(co, k, k, c).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | str = "same") -> Tensor:
    """Stride-1 2-D convolution (cross-correlation) with zero padding.

    ``weight`` has shape (C_out, C_in, k, k); ``padding="same"`` pads by
    ``(k - 1) // 2`` and requires an odd ``k``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d: expected 4-D input and weight")
    co, ci, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("conv2d: kernel must be square")
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {ci}")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("conv2d: 'same' padding needs an odd kernel")
        pad = (k - 1) // 2
    else:
        pad = int(padding)
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    xd, wd = x.data, weight.data
    out = _conv_raw(xd, wd, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def rule(g):
        gx = gw = gb = None
        if x.requires_grad:
            # full correlation with the flipped, channel-transposed kernel
            wt = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _conv_raw(g, wt, k - 1 - pad)
        if weight.requires_grad:
            if k == 1 and pad == 0:
                gw = np.einsum("nohw,nchw->oc", g, xd, optimize=True)[:, :, None, None]
            else:
                gw = _conv_weight_grad(xd, g, k, pad)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit("conv2d", out, inputs, rule)


# backward pass ---------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not tape.records:
        raise TapeError("loss was not produced under an active tape (or the tape is empty)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """Apply one Adam update in place and advance the step counter."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise AutodiffError(f"parameter {p.name or i} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, p in enumerate(params):
        g = p.grad.astype(np.float64)
        m = state.m.get(i)
        v = state.v.get(i)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[i], state.v[i] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


# finite differences ----------------------------------------------------------


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-3, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries of ``arr`` (modified in place and restored).

    Only ``indices`` (flat) are probed when given; the rest stay zero.
    """
    grad = np.zeros(arr.size, dtype=np.float64)
    flat = arr.reshape(-1)
    probe = range(arr.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(arr.shape)
