"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every value in the pipeline is a :class:`Tensor` wrapping a numpy array.  Ops
record their inputs and a closure that maps the output adjoint to input
adjoints; :func:`backward` replays those closures in reverse topological
order.  The op set is closed: only what the matcher needs is provided.
"""

from __future__ import annotations

import contextlib
import json
import logging
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

logger = logging.getLogger(__name__)

DTYPE = np.float64

_grad_enabled = True

# fault-injection hook for the verification suite: scales softmax denominators
_softmax_fault = 1.0


class DimensionError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    # make numpy defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.data)
    return _make(out, (t,), lambda g: (g * out,), "exp")


def log(t: Tensor) -> Tensor:
    return _make(np.log(t.data), (t,), lambda g: (g / t.data,), "log")


def square(t: Tensor) -> Tensor:
    return _make(t.data * t.data, (t,), lambda g: (2.0 * g * t.data,), "square")


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is passed only where the value was inside."""
    inside = (t.data >= lo) & (t.data <= hi)
    return _make(np.clip(t.data, lo, hi), (t,), lambda g: (g * inside,), "clamp")


def _elu_plus_one(t: Tensor) -> Tensor:
    x = t.data
    neg = np.exp(np.minimum(x, 0.0))
    out = np.where(x >= 0, x + 1.0, neg)
    return _make(out, (t,), lambda g: (g * np.where(x >= 0, 1.0, neg),), "elu_plus_one")


def _gelu(t: Tensor) -> Tensor:
    x = t.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _make(x * cdf, (t,), lambda g: (g * (cdf + x * pdf),), "gelu")


def _sigmoid(t: Tensor) -> Tensor:
    x = t.data
    # two-branch form avoids overflow of exp(-x) for large negative x
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (t,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_ACTIVATIONS = {"elu_plus_one": _elu_plus_one, "gelu": _gelu, "sigmoid": _sigmoid}


def activation(kind: str, t: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(as_tensor(t))


def sigmoid(t: Tensor) -> Tensor:
    return _sigmoid(t)


def gelu(t: Tensor) -> Tensor:
    return _gelu(t)


def elu_plus_one(t: Tensor) -> Tensor:
    return _elu_plus_one(t)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is (..., m, k); ``b`` is (..., k, n) with the same leading axes, or a
    plain (k, n) matrix shared across the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, _unbroadcast(gb, b.shape)

    return _make(_batched_product(a.data, b.data), (a, b), backward, "matmul")


def _batched_product(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # numpy fuses (T, m, k) @ (k, n) into one GEMM whose blocking depends on T;
    # per-item products keep every batch entry bit-identical to its lone evaluation
    if x.ndim > 2 and y.ndim == 2:
        flat = x.reshape(-1, *x.shape[-2:])
        out = np.empty((flat.shape[0], x.shape[-2], y.shape[-1]), dtype=np.result_type(x, y))
        for i, item in enumerate(flat):
            np.matmul(item, y, out=out[i])
        return out.reshape(*x.shape[:-1], y.shape[-1])
    return x @ y


def transpose(t: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(t.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    src = t.shape
    return _make(t.data.reshape(shape), (t,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def index(t: Tensor, key) -> Tensor:
    """Basic or fancy indexing; the index itself carries no gradient."""
    if isinstance(key, Tensor):
        key = key.data.astype(np.intp)

    def backward(g):
        full = np.zeros_like(t.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(t.data[key], (t,), backward, "index")


def gather(t: Tensor, rows) -> Tensor:
    """Select rows along axis 0."""
    return index(t, np.asarray(rows, dtype=np.intp))


def _zero_pad(x: np.ndarray, widths) -> np.ndarray:
    # np.pad is general but slow for the small maps here
    out = np.zeros(tuple(n + lo + hi for n, (lo, hi) in zip(x.shape, widths)), dtype=x.dtype)
    out[tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))] = x
    return out


def pad(t: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Constant zero padding."""
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, t.shape))
    return _make(_zero_pad(t.data, widths), (t,), lambda g: (g[slices],), "pad")


# ---------------------------------------------------------------- reductions


def sum_(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = t.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.sum(t.data, axis=axis, keepdims=keepdims), (t,), backward, "sum")


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = t.data.size if axis is None else np.prod([t.shape[a] for a in np.atleast_1d(axis)])
    return sum_(t, axis, keepdims) * (1.0 / n)


def max_(t: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    arg = np.argmax(t.data, axis=axis)
    out = np.take_along_axis(t.data, np.expand_dims(arg, axis), axis)

    def backward(g):
        full = np.zeros_like(t.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(arg, axis), gk, axis)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, axis), (t,), backward, "max")


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    if t.ndim == 0 or t.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {t.shape}")
    z = t.data - np.max(t.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / (np.sum(e, axis=axis, keepdims=True) * _softmax_fault)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (t,), backward, "softmax")


# ---------------------------------------------------------------- convolution


def depthwise_conv3x3(t: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 3x3 cross-correlation with zero padding of one."""
    t, kernel = as_tensor(t), as_tensor(kernel)
    if t.ndim != 3:
        raise DimensionError(f"depthwise_conv3x3 expects C×H×W input, got {t.shape}")
    C, H, W = t.shape
    if kernel.shape != (C, 3, 3):
        raise DimensionError(f"kernel shape {kernel.shape} does not match {C} input channels")
    xp = _zero_pad(t.data, ((0, 0), (1, 1), (1, 1)))
    k = kernel.data
    out = np.zeros_like(t.data)
    for dy in range(3):
        for dx in range(3):
            out += k[:, dy, dx, None, None] * xp[:, dy : dy + H, dx : dx + W]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(k)
        for dy in range(3):
            for dx in range(3):
                gxp[:, dy : dy + H, dx : dx + W] += k[:, dy, dx, None, None] * g
                gk[:, dy, dx] = np.sum(xp[:, dy : dy + H, dx : dx + W] * g, axis=(1, 2))
        return gxp[:, 1:-1, 1:-1], gk

    return _make(out, (t, kernel), backward, "depthwise_conv3x3")


def conv2d(t: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense cross-correlation of a C×H×W map with an O×C×kh×kw kernel."""
    t, weight = as_tensor(t), as_tensor(weight)
    C, H, W = t.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise DimensionError(f"conv2d: weight {weight.shape} vs input {t.shape}")
    xp = _zero_pad(t.data, ((0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    cols = np.empty((C, kh, kw, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols2 = cols.reshape(C * kh * kw, Ho * Wo)
    w2 = weight.data.reshape(O, -1)
    out = (w2 @ cols2).reshape(O, Ho, Wo)

    def backward(g):
        g2 = g.reshape(O, -1)
        gw = (g2 @ cols2.T).reshape(weight.shape)
        gcols = (w2.T @ g2).reshape(C, kh, kw, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, i, j]
        return gxp[:, padding : padding + H, padding : padding + W], gw

    return _make(out, (t, weight), backward, "conv2d")


# ---------------------------------------------------------------- autodiff


class Tape:
    """Topologically ordered record of the ops that produced a tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = tape or Tape.record(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adj[key] = adj[key] + pg if key in adj else pg


def finite_diff_grad(
    f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-6, points: int = 2
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x`` is restored).

    ``points=2`` is the classic (f(x+h) - f(x-h)) / 2h.  ``points=4`` uses the
    fourth-order stencil (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h, which
    allows a larger h and so less cancellation on losses of size O(10).
    """
    if points == 2:
        taps = ((1.0, 0.5), (-1.0, -0.5))
    elif points == 4:
        taps = ((2.0, -1.0 / 12), (1.0, 8.0 / 12), (-1.0, -8.0 / 12), (-2.0, 1.0 / 12))
    else:
        raise ValueError("points must be 2 or 4")
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            acc = 0.0
            for step, weight in taps:
                flat[i] = orig + step * eps
                acc += weight * float(np.asarray(as_tensor(f(x)).data))
            flat[i] = orig
            gflat[i] = acc / eps
    return grad


# ---------------------------------------------------------------- weights I/O

WEIGHTS_FORMAT = "oamatch-weights-v1"


def save_weights(params: dict[str, Tensor], path: str | Path) -> None:
    """Write ``path`` (JSON manifest) and ``path`` with suffix ``.bin`` (raw <f8 blob)."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries = []
    offset = 0
    chunks = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": WEIGHTS_FORMAT, "blob": blob_path.name, "dtype": "<f8", "tensors": entries}
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1) + "\n")


def load_weights(path: str | Path) -> dict[str, Tensor]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"{path}: not a weights manifest (format={manifest.get('format')!r})")
    blob = (path.parent / manifest["blob"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = Tensor(arr.astype(DTYPE), requires_grad=True)
    return out


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
