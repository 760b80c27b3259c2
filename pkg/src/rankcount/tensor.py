"""Minimal n-d tensor with reverse-mode automatic differentiation.

Only what a small fully-convolutional density regressor needs: conv2d,
relu, softplus, global average pooling, elementwise arithmetic, indexing
and reductions. Values are numpy arrays (float32 by default, float64 is
accepted and used by the gradient checks). Reductions accumulate in
float64 and cast back to the value dtype.

Gradient accumulation: ``backward`` *adds* into ``.grad`` of leaf tensors.
Call ``zero_grad`` (or let ``sgd_step`` clear them) between passes.
"""

from __future__ import annotations

import io
import itertools
import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACC = np.float64
_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """A value array plus the bookkeeping needed to differentiate through it."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        _op: str = "",
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id = next(_ids)
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        _check_finite(arr, _op or "tensor construction")

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, op={self._op or 'leaf'})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- graph ------------------------------------------------------------
    def _topo(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """Populate ``.grad`` of every reachable leaf that requires grad.

        Only scalar (size-1) tensors may start a backward pass. Leaf grads
        accumulate across calls.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        grads: dict[int, np.ndarray] = {self.node_id: np.ones_like(self.data)}
        for node in reversed(self._topo()):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                _check_finite(g, f"backward into {node.name or 'leaf'}")
                g = g.astype(node.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other) -> "Tensor":
        return add(_as_tensor(other, self.dtype), -self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_sum(self) / self.data.size

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)


def _raise_scalar(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0, dtype=ACC)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True, dtype=ACC)
    return grad


# -- elementwise ops ---------------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape).astype(a.dtype, copy=False),
            _unbroadcast(g, b.shape).astype(b.dtype, copy=False),
        )

    return Tensor(out, _parents=(a, b), _backward=backward, _op="add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape).astype(a.dtype, copy=False)
        gb = _unbroadcast(g * a.data, b.shape).astype(b.dtype, copy=False)
        return ga, gb

    return Tensor(out, _parents=(a, b), _backward=backward, _op="mul")


def square(x: Tensor) -> Tensor:
    out = x.data * x.data
    return Tensor(out, _parents=(x,), _backward=lambda g: (2.0 * x.data * g,), _op="square")


def relu(x: Tensor) -> Tensor:
    """max(0, x). The derivative at exactly 0 is taken to be 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g * mask,), _op="relu")


def softplus(x: Tensor) -> Tensor:
    v = x.data
    out = (np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))).astype(x.dtype)
    sig = (0.5 * (1.0 + np.tanh(0.5 * v))).astype(x.dtype)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g * sig,), _op="softplus")


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = x.data.reshape(shape)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g.reshape(x.shape),), _op="reshape")


def take(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate in backward."""
    out = np.array(x.data[index], dtype=x.dtype)

    def backward(g):
        gx = np.zeros(x.shape, dtype=ACC)
        np.add.at(gx, index, g)
        return (gx.astype(x.dtype),)

    return Tensor(out, _parents=(x,), _backward=backward, _op="take")


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=ACC), dtype=x.dtype)
    return Tensor(out, _parents=(x,), _backward=lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), _op="sum")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, _parents=tuple(tensors), _backward=backward, _op="concat")


# -- pooling / convolution ---------------------------------------------------
def avg_pool_global(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: [N,F,H,W] -> [N,F]."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool_global expects [N,F,H,W], got {x.shape}")
    n, f, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"empty spatial extent {h}x{w}")
    out = (x.data.sum(axis=(2, 3), dtype=ACC) / (h * w)).astype(x.dtype)

    def backward(g):
        gx = np.broadcast_to((g / (h * w))[:, :, None, None], x.shape)
        return (gx.astype(x.dtype),)

    return Tensor(out, _parents=(x,), _backward=backward, _op="avg_pool_global")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * pad}")
    if span % stride:
        raise ShapeError(
            f"(size {size} + 2*pad {pad} - kernel {k}) is not divisible by stride {stride}"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, [N,C,H,W] * [F,C,kh,kw] -> [N,F,H',W'].

    Sums are accumulated in float64; the output keeps the input dtype.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"input has {c} channels but kernel expects {wc}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col rows: [N*Ho*Wo, C*kh*kw]
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=ACC)
    np.copyto(cols, windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, -1).astype(ACC)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data.astype(ACC)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2), dtype=x.dtype)

    def backward(g):
        gmat = g.astype(ACC, copy=False).transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gmat.T @ cols).reshape(weight.shape).astype(weight.dtype)
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray((gmat @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
            gxp = np.zeros((n, c) + xp.shape[2:], dtype=ACC)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = (gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp).astype(x.dtype)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0).astype(bias.dtype))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out, _parents=parents, _backward=backward, _op="conv2d")


# -- optimisation ------------------------------------------------------------
def sgd_step(params: Iterable[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """p <- p - lr * (grad + weight_decay * p), then clear the grads."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or p.node_id} has no gradient")
    for p in params:
        step = p.grad.astype(ACC) + weight_decay * p.data.astype(ACC)
        p.data = (p.data.astype(ACC) - lr * step).astype(p.dtype)
        _check_finite(p.data, f"sgd update of {p.name}")
        p.grad = None


class SGD:
    """Plain SGD with optional heavy-ball momentum (off by default)."""

    def __init__(self, params: Sequence[Tensor], weight_decay: float = 0.0, momentum: float = 0.0):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._velocity = [np.zeros(p.shape, dtype=ACC) for p in self.params] if momentum else None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        if not self.momentum:
            sgd_step(self.params, lr, self.weight_decay)
            return
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                raise ValueError(f"parameter {p.name or p.node_id} has no gradient")
            v *= self.momentum
            v += p.grad.astype(ACC) + self.weight_decay * p.data.astype(ACC)
            p.data = (p.data.astype(ACC) - lr * v).astype(p.dtype)
            p.grad = None


# -- checkpoint format -------------------------------------------------------
MAGIC = b"RKCNTCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float32 arrays.

    Layout (little-endian): magic, u32 version, u32 meta length + UTF-8 JSON
    meta, u32 tensor count, then per tensor: u32 name length, name,
    u32 rank, u32 dims..., float32 values.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def u32() -> int:
        nonlocal pos
        (v,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        return v

    version = u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    mlen = u32()
    meta = json.loads(raw[pos : pos + mlen].decode())
    pos += mlen
    out: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        nlen = u32()
        name = raw[pos : pos + nlen].decode()
        pos += nlen
        rank = u32()
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out, meta
