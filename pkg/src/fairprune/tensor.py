"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever at least one operand requires a gradient. Outside
a tape every op simply computes values, which keeps inference paths cheap.

Only the ops needed for small CNNs, gate optimization and the fairness
losses are provided. Shapes must match exactly; the only broadcasting is the
per-channel bias/scale family (``conv2d`` bias, ``channel_affine``).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "ShapeError",
    "TapeError",
    "conv2d",
    "linear",
    "relu",
    "add",
    "mul",
    "scale",
    "channel_affine",
    "global_avg_pool",
    "softmax",
    "log",
    "sigmoid",
    "take",
    "sum",
    "mean",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised for invalid tape usage (non-scalar output, reuse after backward)."""


class Tensor:
    """A float64 array that may participate in gradient computation."""

    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class _Record:
    kind: str
    inputs: tuple
    output: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_local, "tape", None)


@dataclass
class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Usage::

        with Tape() as tape:
            loss = ...
        grads = tape.backward(loss)
        grads[weight]
    """

    records: list = field(default_factory=list)
    _nodes: dict = field(default_factory=dict)  # node id -> Tensor
    _leaf_ids: dict = field(default_factory=dict)  # id(tensor) -> node id
    _consumed: bool = False
    _prev: object = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def node_of(self, t: Tensor) -> Optional[int]:
        if t.node_id is not None and self._nodes.get(t.node_id) is t:
            return t.node_id
        return self._leaf_ids.get(id(t))

    def _register(self, t: Tensor) -> int:
        nid = self.node_of(t)
        if nid is None:
            nid = len(self._nodes)
            self._nodes[nid] = t
            self._leaf_ids[id(t)] = nid
        return nid

    def _record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, backward) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        in_ids = tuple(self._register(t) if t.requires_grad else None for t in inputs)
        nid = len(self._nodes)
        self._nodes[nid] = out
        out.node_id = nid
        self.records.append(_Record(kind, in_ids, nid, backward))

    def backward(self, output: Tensor) -> "Gradients":
        """Propagate d(output)/d(node) to every reachable requires_grad node."""
        if self._consumed:
            raise TapeError("backward() already called on this tape")
        if output.data.size != 1:
            raise TapeError(f"backward() needs a scalar output, got shape {output.shape}")
        root = self.node_of(output)
        if root is None:
            raise TapeError("output was not produced on this tape")
        self._consumed = True
        grads: dict[int, np.ndarray] = {root: np.ones_like(output.data)}
        for rec in reversed(self.records):
            gout = grads.get(rec.output)
            if gout is None:
                continue
            in_grads = rec.backward(gout)
            for nid, g in zip(rec.inputs, in_grads):
                if nid is None or g is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + g
                else:
                    grads[nid] = g
        return Gradients(self, grads)


class Gradients:
    """Gradient lookup keyed by the tensors of one tape."""

    def __init__(self, tape: Tape, grads: dict):
        self._tape = tape
        self._grads = grads

    def get(self, t: Tensor) -> Optional[np.ndarray]:
        nid = self._tape.node_of(t)
        if nid is None or not t.requires_grad:
            return None
        g = self._grads.get(nid)
        return None if g is None else g

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        if g is None:
            if t.requires_grad:
                return np.zeros_like(t.data)
            raise KeyError("tensor does not require a gradient")
        return g

    def __contains__(self, t: Tensor) -> bool:
        return self.get(t) is not None

    def __len__(self) -> int:
        return len(self._grads)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, inputs: Sequence[Tensor], value: np.ndarray, backward) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape._record(kind, inputs, out, backward)
    return out


# --------------------------------------------------------------------------
# convolution / affine
# --------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with per-output-channel bias.

    The forward sum accumulates over (input channel, kernel row, kernel col)
    in that order and adds the bias last, so it is bit-identical to a naive
    nested-loop reference using the same order.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in}, weight expects {wc_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({c_out},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = weight.data
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    out = np.zeros((n, c_out, ho, wo))
    for c in range(c_in):
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, c, i : i + span_h : stride, j : j + span_w : stride]
                out += patch[:, None, :, :] * wd[None, :, c, i, j, None, None]
    out += bias.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i : i + span_h : stride, j : j + span_w : stride]
                    gw[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))  # n,ho,wo,c_in
                    gxp[:, :, i : i + span_h : stride, j : j + span_w : stride] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _make("conv2d", (x, weight, bias), out, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make("linear", (x, weight, bias), out, backward)


def channel_affine(x: Tensor, scale_: Optional[Tensor] = None, shift: Optional[Tensor] = None) -> Tensor:
    """Per-channel ``x * scale + shift`` over axis 1 of an [N, C, ...] tensor."""
    x = _as_tensor(x)
    c = x.shape[1]
    view = (1, c) + (1,) * (x.data.ndim - 2)
    reduce_axes = (0,) + tuple(range(2, x.data.ndim))
    inputs = [x]
    out = x.data
    if scale_ is not None:
        scale_ = _as_tensor(scale_)
        if scale_.shape != (c,):
            raise ShapeError(f"channel scale shape {scale_.shape} != ({c},)")
        out = out * scale_.data.reshape(view)
        inputs.append(scale_)
    if shift is not None:
        shift = _as_tensor(shift)
        if shift.shape != (c,):
            raise ShapeError(f"channel shift shape {shift.shape} != ({c},)")
        out = out + shift.data.reshape(view)
        inputs.append(shift)

    def backward(g):
        res = [g * scale_.data.reshape(view) if scale_ is not None else g]
        if scale_ is not None:
            res.append((g * x.data).sum(axis=reduce_axes) if scale_.requires_grad else None)
        if shift is not None:
            res.append(g.sum(axis=reduce_axes) if shift.requires_grad else None)
        if not x.requires_grad:
            res[0] = None
        return res

    return _make("channel_affine", inputs, out, backward)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is taken as 0."""
    x = _as_tensor(x)
    on = x.data > 0
    return _make("relu", (x,), np.where(on, x.data, 0.0), lambda g: (g * on,))


def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"add shape mismatch: {x.shape} vs {y.shape}")
    return _make("add", (x, y), x.data + y.data, lambda g: (g, g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"mul shape mismatch: {x.shape} vs {y.shape}")
    return _make("mul", (x, y), x.data * y.data, lambda g: (g * y.data, g * x.data))


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    return _make("scale", (x,), x.data * s, lambda g: (g * s,))


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data + eps
    return _make("log", (x,), np.log(shifted), lambda g: (g / shifted,))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def take(x: Tensor, index: Iterable[int]) -> Tensor:
    """Gather entries of a 1-D tensor; repeated indices accumulate in backward."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError(f"take expects a 1-D tensor, got {x.shape}")
    idx = np.asarray(list(index), dtype=np.intp)
    if idx.size == 0:
        raise ShapeError("take needs at least one index")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("take", (x,), x.data[idx], backward)


# --------------------------------------------------------------------------
# reductions / heads
# --------------------------------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    shape = x.shape
    return _make("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.data.size
    return _make("mean", (x,), np.asarray(x.data.mean()), lambda g: (np.full(shape, float(g) / n),))


def global_avg_pool(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, x.shape).copy(),)

    return _make("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), backward)


def softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax expects [N,K] with K >= 2, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make("softmax", (x,), s, backward)
