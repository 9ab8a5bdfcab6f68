"""Dense float64 tensors with reverse-mode differentiation.

Execution is define-by-run: while a `Tape` is active, every differentiable
op appends one node (saved inputs + backward closure) to it, and
`backward(loss)` walks the list in exact reverse execution order,
accumulating adjoints additively.  Without an active tape the same ops run
as plain forward kernels.

Reductions that feed attention (`softmax` denominators and `attn_mix`
contractions) sum their terms in value-sorted order, so results are
bitwise invariant to permutations along the reduced axis.  That property
is what lets one checkpoint serve any channel count and ordering.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError, IoError, ShapeError

_LN_EPS = 1e-5
_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715

_tape_stack: list["Tape"] = []


class Tensor:
    """A dense float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node_index")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node_index: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Ordered record of executed ops; activate with a `with` block."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad and _tape_stack:
        tape = _tape_stack[-1]
        out._tape = tape
        out._node_index = len(tape.nodes)
        tape.nodes.append(_Node(out, inputs, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _sorted_sum(values: np.ndarray, axis: int) -> np.ndarray:
    """Sum along `axis` in ascending value order (permutation-stable)."""
    return np.sort(values, axis=axis).sum(axis=axis)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    return _record(a.data * factor, (a,), lambda g: (g * factor,))


def log(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (g / a.data,)

    return _record(np.log(a.data), (a,), bwd)


def transpose(a, axis1: int = -2, axis2: int = -1) -> Tensor:
    a = _as_tensor(a)
    out = np.swapaxes(a.data, axis1, axis2)
    return _record(out, (a,), lambda g: (np.swapaxes(g, axis1, axis2),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {a.shape} does not fit {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[p.shape for p in parts]} on axis {axis}"
        ) from None
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(parts), bwd)


def slice_(a, key) -> Tensor:
    """Basic indexing (ints and slices); gradient scatters back."""
    a = _as_tensor(a)
    out = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record(np.array(out, copy=True), (a,), bwd)


def embedding_lookup(table, indices) -> Tensor:
    table = _as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    out = table.data[indices]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        return (gt,)

    return _record(out, (table,), bwd)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}") from None
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


_ATTN_MIX_CHUNK = 1 << 22  # max scratch elements for the sorted contraction


def attn_mix(probs, values) -> Tensor:
    """Matmul with a value-sorted contraction (for attention @ values).

    Forward result is bitwise invariant to a simultaneous permutation of
    the contraction axis in both operands, which plain BLAS summation is
    not.  Batch dims must match exactly.
    """
    probs, values = _as_tensor(probs), _as_tensor(values)
    if probs.data.ndim < 2 or values.data.ndim < 2:
        raise ShapeError(f"attn_mix: operands must be >= 2-D, got {probs.shape} and {values.shape}")
    if probs.shape[-1] != values.shape[-2] or probs.shape[:-2] != values.shape[:-2]:
        raise ShapeError(f"attn_mix: incompatible shapes {probs.shape} @ {values.shape}")
    batch = probs.shape[:-2]
    n, k = probs.shape[-2], probs.shape[-1]
    m = values.shape[-1]
    p2 = probs.data.reshape((-1, n, k))
    v2 = values.data.reshape((-1, k, m))
    out = np.empty((p2.shape[0], n, m), dtype=np.float64)
    step = max(1, _ATTN_MIX_CHUNK // max(1, n * k * m))
    for start in range(0, p2.shape[0], step):
        stop = start + step
        terms = p2[start:stop, :, :, None] * v2[start:stop, None, :, :]
        out[start:stop] = _sorted_sum(terms, axis=2)
    out = out.reshape(batch + (n, m))

    def bwd(g):
        gp = g @ np.swapaxes(values.data, -1, -2)
        gv = np.swapaxes(probs.data, -1, -2) @ g
        return gp, gv

    return _record(out, (probs, values), bwd)


# ---------------------------------------------------------------------------
# nonlinear ops
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax; the normalizer sums exp terms in sorted order."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = np.expand_dims(_sorted_sum(e, axis=axis), axis)
    s = e / denom

    def bwd(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _record(s, (a,), bwd)


def layer_norm(a, axis: int = -1) -> Tensor:
    """Normalize to zero mean / unit variance along `axis` (eps 1e-5)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    y = xc * inv

    def bwd(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record(y, (a,), bwd)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_C0 * (x + _GELU_C1 * x**3)
    th = np.tanh(u)
    y = 0.5 * x * (1.0 + th)

    def bwd(g):
        du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x**2)
        dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du
        return (g * dy,)

    return _record(y, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions / losses
# ---------------------------------------------------------------------------


def _expand_axes(g: np.ndarray, axis, shape: tuple[int, ...]) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis)
    count = a.data.size / max(1, np.asarray(out).size)

    def bwd(g):
        return (_expand_axes(np.asarray(g), axis, a.shape) / count,)

    return _record(out, (a,), bwd)


def mse(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.mean(diff**2)

    def bwd(g):
        gp = g * 2.0 * diff / diff.size
        return gp, -gp

    return _record(out, (pred, target), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad for every reachable requires_grad tensor.

    Gradients accumulate additively: calling backward twice without zeroing
    doubles every gradient.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward requires a scalar Tensor loss")
    tape = loss._tape
    if tape is None:
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any requires_grad tensor")
        raise ContractError("loss was computed outside any active Tape")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes[: loss._node_index + 1]):
        g_out = adjoints.get(id(node.out))
        if g_out is None:
            continue
        grads = node.bwd(g_out)
        for tensor, g in zip(node.inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in adjoints:
                adjoints[key] = adjoints[key] + g
            else:
                adjoints[key] = g
                holders[key] = tensor
    for key, tensor in holders.items():
        if tensor.requires_grad:
            g = adjoints[key]
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint format "FCKP v1"
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"FCKP"
_DTYPE_TAGS = {0: "<f8", 1: "<f4"}
_TAG_FOR = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def save_checkpoint(named: dict[str, np.ndarray], path) -> None:
    """Write name -> array pairs in iteration order."""
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<I", len(named))
    for name, array in named.items():
        array = np.asarray(array)
        tag = _TAG_FOR.get(array.dtype)
        if tag is None:
            raise FormatError(f"checkpoint: unsupported dtype {array.dtype} for {name!r}")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<BB", tag, array.ndim)
        blob += struct.pack(f"<{array.ndim}Q", *array.shape)
        blob += np.ascontiguousarray(array, dtype=_DTYPE_TAGS[tag]).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(blob))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as name -> float64 array, in file order."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {_CKPT_MAGIC!r}")
    (count,) = struct.unpack_from("<I", buf, 4)
    offset = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            name = buf[offset : offset + name_len].decode("utf-8")
            offset += name_len
            tag, rank = struct.unpack_from("<BB", buf, offset)
            offset += 2
            dims = struct.unpack_from(f"<{rank}Q", buf, offset)
            offset += 8 * rank
            dtype = _DTYPE_TAGS[tag]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * np.dtype(dtype).itemsize
            flat = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims, dtype=np.int64)), offset=offset)
            offset += n_bytes
        except (struct.error, KeyError, ValueError) as exc:
            raise FormatError(f"{path}: truncated or corrupt tensor record") from exc
        out[name] = flat.astype(np.float64).reshape(dims)
    if offset != len(buf):
        raise FormatError(f"{path}: {len(buf) - offset} trailing bytes")
    return out
