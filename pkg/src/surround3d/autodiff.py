"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built eagerly; ``Tensor.backward`` walks them once in reverse
topological order and accumulates gradients by addition. Every op checks its
output for NaN/Inf.
"""

from __future__ import annotations

import struct
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class AutodiffError(ValueError):
    pass


class ShapeMismatch(AutodiffError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class ChecksumMismatch(IOError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _parents=(), _op: str = "leaf"):
        arr = np.array(data, dtype=np.float64, copy=True) if _op == "leaf" else np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"non-finite value produced by {_op}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op
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
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        self.grad = g.copy() if self.grad is None else self.grad + g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: np.ndarray | None = None):
        """Reverse pass from this node; seeds with ones when ``grad`` is None."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor(data, _parents=tuple(parents), _op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Valid-padding 2-D cross-correlation.

    x: (N, C, H, W); weight: (O, C, k, k); bias: (O,). Output
    (N, O, (H - k) // stride + 1, (W - k) // stride + 1).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {weight.shape}")
    k = weight.shape[2]
    if weight.shape[3] != k or x.shape[2] < k or x.shape[3] < k or stride < 1:
        raise ShapeMismatch(f"conv2d: kernel {weight.shape[2:]} on input {x.shape[2:]} stride {stride}")
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.einsum("nchwij,ocij->nohw", win, weight.data, optimize=True)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"conv2d: bias {bias.shape} for {weight.shape[0]} outputs")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(np.einsum("nohw,nchwij->ocij", g, win, optimize=True))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            contrib = np.einsum("nohw,ocij->ncijhw", g, weight.data, optimize=True)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib[:, :, i, j]
            x._accumulate(gx)

    return _node(out, parents, "conv2d", backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        x._accumulate(g * pos)

    return _node(np.where(pos, x.data, 0.0), (x,), "relu", backward)


def log(x, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; no gradient flows where x <= floor."""
    x = as_tensor(x)
    if floor <= 0 and np.any(x.data <= 0):
        raise NonFiniteValue("log of non-positive value")
    live = x.data > floor
    safe = np.where(live, x.data, 1.0)

    def backward(g):
        x._accumulate(np.where(live, g / safe, 0.0))

    return _node(np.log(np.where(live, x.data, floor)), (x,), "log", backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="raise"):
        try:
            y = np.exp(x.data)
        except FloatingPointError:
            raise NonFiniteValue("exp overflow") from None

    def backward(g):
        x._accumulate(g * y)

    return _node(y, (x,), "exp", backward)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)

    def backward(g):
        x._accumulate(g * sign)

    return _node(np.abs(x.data), (x,), "abs", backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, (x,), "softmax", backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    s = np.exp(y)

    def backward(g):
        x._accumulate(g - s * g.sum(axis=axis, keepdims=True))

    return _node(y, (x,), "log_softmax", backward)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _node(y, (x,), "sum", backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def gather(x, mask) -> Tensor:
    """Select entries where ``mask`` is true (flattened, row-major order)."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[: mask.ndim]:
        raise ShapeMismatch(f"gather: mask {mask.shape} vs tensor {x.shape}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[mask] = g
        x._accumulate(gx)

    return _node(x.data[mask], (x,), "gather", backward)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) for p in parts)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        x._accumulate(gx)

    return _node(x.data[idx], (x,), "getitem", backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}") from None

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _node(y, (x,), "reshape", backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return _node(np.transpose(x.data, axes), (x,), "transpose", backward)


def pad(x, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` as in ``numpy.pad``."""
    x = as_tensor(x)
    pw = [tuple(p) for p in pad_width]
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, x.shape))

    def backward(g):
        x._accumulate(g[sl])

    return _node(np.pad(x.data, pw), (x,), "pad", backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len({t.shape for t in ts}) != 1:
        raise ShapeMismatch("stack: shapes differ")

    def backward(g):
        for i, t in enumerate(ts):
            t._accumulate(np.take(g, i, axis=axis))

    return _node(np.stack([t.data for t in ts], axis=axis), ts, "stack", backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, part in zip(ts, np.split(g, sizes, axis=axis)):
            t._accumulate(part)

    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat: incompatible shapes") from None
    return _node(data, ts, "concat", backward)


def grl(x, lambda_r: float) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times -lambda_r backward."""
    x = as_tensor(x)
    if lambda_r < 0:
        raise AutodiffError("GRL coefficient must be non-negative")
    scale = -float(lambda_r)

    def backward(g):
        x._accumulate(g * scale)

    return _node(x.data, (x,), "grl", backward)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], learning_rate: float) -> list[np.ndarray]:
    """Plain gradient descent ``p - lr * g``; a missing gradient counts as zero."""
    if len(params) != len(grads):
        raise ShapeMismatch("sgd_step: parameter and gradient counts differ")
    out = []
    for p, g in zip(params, grads):
        if g is None:
            out.append(np.array(p, copy=True))
            continue
        if np.shape(p) != np.shape(g):
            raise ShapeMismatch(f"sgd_step: parameter {np.shape(p)} vs gradient {np.shape(g)}")
        out.append(p - learning_rate * g)
    return out


def numeric_gradient(fn: Callable[[], Tensor], array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``array`` (mutated in place, restored)."""
    g = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    """``||n - a|| / max(||n||, ||a||)``; zero when both vanish."""
    num = float(np.linalg.norm(numeric - analytic))
    den = max(float(np.linalg.norm(numeric)), float(np.linalg.norm(analytic)))
    if den < 1e-12:
        return num
    return num / den


def check_gradients(fn: Callable[[], Tensor], leaves: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between backward and finite differences over ``leaves``."""
    leaves = list(leaves)
    for t in leaves:
        t.zero_grad()
    fn().backward()
    worst = 0.0
    for t in leaves:
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(numeric_gradient(fn, t.data, eps), ana))
    return worst


# Checkpoints: b"OR3D", u32 version, u32 count, then per tensor
# u32 name length, name bytes, u32 rank, u32 extents, f64 values (all LE);
# a trailing u32 CRC-32 of everything before it.
MAGIC = b"OR3D"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is row-major regardless of layout
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ChecksumMismatch(f"{path}: not a checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise ChecksumMismatch(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return out
