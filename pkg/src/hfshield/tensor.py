"""Dense float64 tensors with a tape-based reverse-mode gradient.

Every op is a pure function returning a new :class:`Tensor`.  When a
:class:`GradTape` is active in the current context, the op also records a
backward closure; ``tape.backward(loss)`` walks those records in reverse.

    with GradTape() as tape:
        y = tanh(matmul(x, w))
        loss = sum_all(y * y)
    grads = tape.backward(loss)
    grads[w]  # ndarray shaped like w
"""
from __future__ import annotations

import contextvars
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
MAGIC = b"HFT1"

_active_tape: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "hfshield_active_tape", default=None
)


class Tensor:
    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    __hash__ = object.__hash__

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
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Records ops executed inside its ``with`` block.

    A tape is single-writer.  Nested tapes are not supported; entering a
    tape while another is active raises.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.watched: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        if _active_tape.get() is not None:
            raise RuntimeError("a GradTape is already recording in this context")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def watch(self, *tensors: Tensor) -> None:
        self.watched.extend(tensors)

    def recorded(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for t in self.watched:
            seen.setdefault(id(t), t)
        for node in self.nodes:
            for t in node.inputs:
                seen.setdefault(id(t), t)
            seen.setdefault(id(node.out), node.out)
        return list(seen.values())

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = acc.get(id(node.out))
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                prev = acc.get(id(t))
                acc[id(t)] = gi if prev is None else prev + gi
        grads: dict[Tensor, np.ndarray] = {}
        for t in self.recorded():
            g = acc.get(id(t))
            t.grad = np.zeros_like(t.data) if g is None else g
            grads[t] = t.grad
        return grads


def backward(loss: Tensor, tape: GradTape) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _record(out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    tape = _active_tape.get()
    if tape is not None:
        tape.nodes.append(_Node(out, tuple(inputs), fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    return _record(out, (a,), lambda g: (2.0 * a.data * g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def sign(a: Tensor) -> Tensor:
    # sign(0) == 0; derivative is zero almost everywhere
    out = Tensor(np.sign(a.data))
    return _record(out, (a,), lambda g: (np.zeros_like(a.data),))


def clip(a: Tensor, lo, hi) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    lo_arr = np.asarray(lo, dtype=DTYPE)
    hi_arr = np.asarray(hi, dtype=DTYPE)
    if np.any(lo_arr > hi_arr):
        raise ValueError("clip: lower bound exceeds upper bound")
    y = np.minimum(np.maximum(a.data, lo_arr), hi_arr)
    inside = (a.data >= lo_arr) & (a.data <= hi_arr)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * inside,))


# ---- shape & reductions --------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def sum_axis(a: Tensor, axis: int | tuple[int, ...], keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[N,C,H,W] + bias[C] or bias[N,C], broadcast over space."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.ndim != 4:
        raise ValueError(f"add_channel_bias expects [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if bias.shape == (c,):
        b = bias.data[None, :, None, None]
    elif bias.shape == (x.shape[0], c):
        b = bias.data[:, :, None, None]
    else:
        raise ValueError(f"bias shape {bias.shape} does not match channels of {x.shape}")
    out = Tensor(x.data + b)

    def back(g):
        gb = g.sum(axis=(2, 3))
        if bias.ndim == 1:
            gb = gb.sum(axis=0)
        return g, gb

    return _record(out, (x, bias), back)


# ---- convolution ---------------------------------------------------------

def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, width, mode="edge" if mode == "replicate" else "constant")


def _unpad(g: np.ndarray, p: int, mode: str, h: int, w: int) -> np.ndarray:
    """Adjoint of _pad."""
    if p == 0:
        return g
    if mode == "zero":
        return g[..., p:p + h, p:p + w]
    rows = np.clip(np.arange(-p, h + p), 0, h - 1)
    cols = np.clip(np.arange(-p, w + p), 0, w - 1)
    sel_r = np.zeros((h + 2 * p, h))
    sel_r[np.arange(h + 2 * p), rows] = 1.0
    sel_c = np.zeros((w + 2 * p, w))
    sel_c[np.arange(w + 2 * p), cols] = 1.0
    return np.einsum("...ij,ia,jb->...ab", g, sel_r, sel_c)


def conv2d(x, kernel, padding: str = "zero") -> Tensor:
    """Same-size 2-D cross-correlation.

    ``x`` is [C_in,H,W] or batched [N,C_in,H,W]; ``kernel`` is
    [C_out,C_in,k,k] with k odd.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if padding not in ("zero", "replicate"):
        raise ValueError(f"unknown padding mode {padding!r}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be [C_out,C_in,k,k], got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ValueError(f"input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"input has {xd.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    n, _, h, w = xd.shape
    p = k // 2
    xp = _pad(xd, p, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,H,W,k,k
    y = np.einsum("nchwij,ocij->nohw", win, kernel.data, optimize=True)
    out = Tensor(y if batched else y[0])

    def back(g):
        gd = g if batched else g[None]
        gk = np.einsum("nchwij,nohw->ocij", win, gd, optimize=True)
        gp = _pad(gd, k - 1, "zero")
        gwin = sliding_window_view(gp, (k, k), axis=(2, 3))
        flipped = kernel.data[:, :, ::-1, ::-1]
        gxp = np.einsum("nohwij,ocij->nchw", gwin, flipped, optimize=True)
        gx = _unpad(gxp, p, padding, h, w)
        return (gx if batched else gx[0]), gk

    return _record(out, (x, kernel), back)


# ---- serialization -------------------------------------------------------

def tensor_to_bytes(arr) -> bytes:
    a = np.ascontiguousarray(np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8"))
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("not an HFT1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = pos + 8 * count
    if end > len(buf):
        raise ValueError("truncated HFT1 tensor payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(DTYPE)
    return arr, end


def save_tensor(arr, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"{path}: trailing bytes after tensor payload")
    return arr


def parameters_of(tensors: Iterable[Tensor]) -> int:
    return sum(t.data.size for t in tensors)
