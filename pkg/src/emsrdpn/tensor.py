"""Dense 4-D tensors, differentiable primitives and a reverse-mode tape.

Every op works on ``(batch, channels, rows, cols)`` arrays. When a
:class:`GradientTape` is active the op appends an :class:`OpRecord` holding a
closure that maps output gradients to input gradients; :func:`backward` then
walks the records in reverse.
"""

from __future__ import annotations

import itertools
import os
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_node_ids = itertools.count(1)
_tapes: list["GradientTape"] = []
_counters: list["OpCounts"] = []
_DEBUG = bool(os.environ.get("EMSRDPN_DEBUG"))


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    """Immutable 4-D array node.

    Parameters carry a ``name``; gradients returned by :func:`backward` are
    keyed by it.
    """

    __slots__ = ("data", "name", "requires_grad", "node")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _infer_dtype(data), copy=True)
        self._init(arr, name, requires_grad)

    def _init(self, arr: np.ndarray, name, requires_grad) -> None:
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (n, c, h, w), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all tensor dimensions must be >= 1, got {arr.shape}")
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor")
        arr.flags.writeable = False
        self.data = arr
        self.name = name
        self.requires_grad = requires_grad
        self.node = next(_node_ids)

    @classmethod
    def wrap(cls, arr: np.ndarray, name: str | None = None, requires_grad: bool = False) -> "Tensor":
        """Adopt ``arr`` without copying. The caller gives up write access."""
        t = cls.__new__(cls)
        t._init(arr, name, requires_grad)
        return t

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def parameter(data, name: str) -> Tensor:
    return Tensor(data, name=name, requires_grad=True)


@dataclass
class OpRecord:
    kind: str
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    context: dict
    backward: Callable[[list[np.ndarray | None]], list[np.ndarray | None]]


class GradientTape:
    """Records ops executed inside a ``with`` block, in execution order."""

    def __init__(self) -> None:
        self.records: list[OpRecord] = []
        self.values: dict[int, Tensor] = {}
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "GradientTape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def _record(self, kind, inputs: Sequence[Tensor], outputs: Sequence[Tensor], context, fn) -> None:
        for t in itertools.chain(inputs, outputs):
            self.values[t.node] = t
        self.records.append(OpRecord(kind, tuple(t.node for t in inputs),
                                     tuple(t.node for t in outputs), context, fn))

    def gradient(self, t: Tensor) -> np.ndarray | None:
        return self.grads.get(t.node)


def _record(kind, inputs, outputs, context, fn) -> None:
    if _tapes:
        _tapes[-1]._record(kind, inputs, outputs, context, fn)


@dataclass
class OpCounts:
    """Arithmetic and memory actually executed inside a :func:`count_ops` block."""

    macs: int = 0
    bias_adds: int = 0
    relu: int = 0
    adds: int = 0
    activation_elems: int = 0
    calls: Counter = field(default_factory=Counter)

    @property
    def flops(self) -> int:
        return self.macs + self.bias_adds + self.relu + self.adds


@contextmanager
def count_ops() -> Iterator[OpCounts]:
    counts = OpCounts()
    _counters.append(counts)
    try:
        yield counts
    finally:
        _counters.remove(counts)


def tally(**kw) -> None:
    """Add to every active counter; ``calls`` entries go through ``call=``."""
    for c in _counters:
        for k, v in kw.items():
            if k == "call":
                c.calls[v] += 1
            else:
                setattr(c, k, getattr(c, k) + v)


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """``(n, c*k*k, h*w)`` patch matrix; row ``(ci, i, j)`` holds input channel
    ``ci`` shifted by ``(i, j)``."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * k * k, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int | None = None) -> Tensor:
    """Same-size cross-correlation with zero padding, plus per-channel bias.

    ``bias`` is a ``(1, c_out, 1, 1)`` tensor.
    """
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c_in != c or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if k not in (1, 3):
        raise ShapeError(f"conv2d: kernel size must be 1 or 3, got {k}")
    if bias.shape != (1, c_out, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match weight {weight.shape}")
    pad = (k - 1) // 2
    if padding is not None and padding != pad:
        raise ShapeError(f"conv2d: padding must be {pad} for a {k}x{k} kernel, got {padding}")

    if k == 1:
        cols = x.data.reshape(n, c, h * w)
    else:
        cols = _im2col(np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))), k, h, w)
    wmat = weight.data.reshape(c_out, c * k * k)
    out = np.matmul(wmat, cols)
    out += bias.data.reshape(1, c_out, 1)
    y = Tensor.wrap(out.reshape(n, c_out, h, w))

    tally(macs=k * k * c * c_out * n * h * w, bias_adds=c_out * n * h * w,
          activation_elems=out.size, call="conv2d")

    def back(grads):
        g = grads[0].reshape(n, c_out, h * w)
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gb = g.sum(axis=(0, 2)).reshape(bias.shape)
        dcols = np.matmul(wmat.T, g)
        if k == 1:
            return [dcols.reshape(n, c, h, w), gw, gb]
        dcols = dcols.reshape(n, c, k, k, h, w)
        gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + h, j:j + w] += dcols[:, :, i, j]
        return [gx[:, :, pad:-pad, pad:-pad], gw, gb]

    _record("conv2d", [x, weight, bias], [y], {"k": k, "padding": pad}, back)
    return y


# --------------------------------------------------------------------------
# elementwise and structural ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = Tensor.wrap(np.where(mask, x.data, 0).astype(x.dtype, copy=False))
    tally(relu=x.data.size, activation_elems=x.data.size, call="relu")
    _record("relu", [x], [y], {}, lambda grads: [grads[0] * mask])
    return y


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    y = Tensor.wrap(a.data + b.data)
    tally(adds=a.data.size, activation_elems=a.data.size, call="add")
    _record("add", [a, b], [y], {}, lambda grads: [grads[0], grads[0]])
    return y


def channel_concat(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("channel_concat: no inputs")
    n, _, h, w = parts[0].shape
    for p in parts:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"channel_concat: {p.shape} does not match (n,h,w)=({n},{h},{w})")
    widths = [p.shape[1] for p in parts]
    y = Tensor.wrap(np.concatenate([p.data for p in parts], axis=1))
    tally(activation_elems=y.data.size, call="concat")
    bounds = np.cumsum([0] + widths)

    def back(grads):
        g = grads[0]
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(widths))]

    _record("concat", list(parts), [y], {"widths": widths}, back)
    return y


def channel_split(x: Tensor, widths: Sequence[int]) -> list[Tensor]:
    widths = list(widths)
    if any(wd <= 0 for wd in widths) or sum(widths) != x.shape[1]:
        raise ShapeError(f"channel_split: widths {widths} do not partition {x.shape[1]} channels")
    bounds = np.cumsum([0] + widths)
    outs = [Tensor.wrap(x.data[:, bounds[i]:bounds[i + 1]]) for i in range(len(widths))]
    tally(call="split")

    def back(grads):
        full = []
        for g, wd, o in zip(grads, widths, outs):
            full.append(g if g is not None else np.zeros(o.shape, dtype=x.dtype))
        return [np.concatenate(full, axis=1)]

    _record("split", [x], outs, {"widths": widths}, back)
    return outs


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    oc = c // (r * r)
    return a.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, oc, H, W = a.shape
    h, w = H // r, W // r
    return a.reshape(n, oc, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, oc * r * r, h, w)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange ``(n, c*r*r, h, w)`` into ``(n, c, h*r, w*r)``."""
    if r < 1 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: {x.shape[1]} channels not divisible by r^2={r * r}")
    y = Tensor.wrap(np.ascontiguousarray(_shuffle(x.data, r)))
    tally(activation_elems=y.data.size, call="pixel_shuffle")
    _record("pixel_shuffle", [x], [y], {"r": r}, lambda grads: [_unshuffle(grads[0], r)])
    return y


def pixel_unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    """Inverse permutation of :func:`pixel_shuffle` on raw arrays."""
    return np.ascontiguousarray(_unshuffle(a, r))


def tsum(x: Tensor) -> Tensor:
    y = Tensor.wrap(np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1))
    _record("sum", [x], [y], {}, lambda grads: [np.broadcast_to(grads[0], x.shape)])
    return y


def record_custom(kind: str, inputs: Sequence[Tensor], output: Tensor, fn, context=None) -> None:
    """Register an op implemented outside this module (e.g. a loss)."""
    _record(kind, inputs, [output], context or {}, fn)


# --------------------------------------------------------------------------
# reverse pass


def backward(tape: GradientTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) through ``tape``.

    Returns gradients for every named ``requires_grad`` tensor the graph
    touched. Untouched parameters are absent.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward: loss must be scalar (1,1,1,1), got {loss.shape}")

    # Node ids grow monotonically with creation time, so a well-formed record
    # only consumes nodes older than everything it produces.
    last = 0
    for rec in tape.records:
        if rec.inputs and max(rec.inputs) >= min(rec.outputs) or min(rec.outputs) <= last:
            raise RuntimeError(f"tape is not in topological order at op {rec.kind!r} (cycle?)")
        last = max(rec.outputs)

    grads: dict[int, np.ndarray] = {loss.node: np.ones((1, 1, 1, 1), dtype=loss.dtype)}
    for rec in reversed(tape.records):
        out_grads = [grads.get(o) for o in rec.outputs]
        if all(g is None for g in out_grads):
            continue
        in_grads = rec.backward(out_grads)
        for nid, g in zip(rec.inputs, in_grads):
            if g is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + g
            else:
                grads[nid] = np.array(g, copy=True)
    tape.grads = grads

    result = {}
    for nid, g in grads.items():
        t = tape.values.get(nid)
        if t is not None and t.requires_grad and t.name is not None:
            result[t.name] = g
    return result

