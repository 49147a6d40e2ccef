"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Forward ops record a node on the active :class:`Tape` whenever one of their
inputs requires a gradient.  :func:`backward` walks the tape in reverse
insertion order and accumulates gradients into leaf parameters.
"""
from __future__ import annotations

import contextlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class Tensor:
    """Dense float64 array that may participate in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._node = None

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
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


class Parameter(Tensor):
    """Leaf tensor with a gradient accumulator."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Append-only record of differentiable forward operations.

    Use as a context manager; ops executed inside the block are recorded.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._closed = False

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, parents, backward_fn, op: str) -> None:
        node = _Node(out, tuple(parents), backward_fn, op)
        out._node = (self, len(self.nodes))
        self.nodes.append(node)

    def release(self) -> None:
        """Drop recorded nodes; breaks tensor/tape reference cycles once gradients are taken."""
        self.nodes.clear()

    def contains(self, tensor: Tensor) -> bool:
        return any(tensor is p for node in self.nodes for p in node.parents)


_TAPES: list[Tape] = []
_GRAD_ENABLED = [True]


def active_tape() -> Tape | None:
    if not _GRAD_ENABLED[-1] or not _TAPES:
        return None
    return _TAPES[-1]


@contextlib.contextmanager
def no_grad():
    """Suspend recording on every tape inside the block."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from op '{op}'")
    tape = active_tape()
    out = Tensor(data)
    if tape is not None and any(_tracked(p) for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn, op)
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


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data ** p, (a,), bw, "power")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# ---------------------------------------------------------------------------
# unary nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    y = np.maximum(a.data, 0.0)
    return _make(y, (a,), lambda g: (np.where(y > 0, g, 0.0),), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _make(y, (a,), lambda g: (g / a.data,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def gather_rows(a, index) -> Tensor:
    """Select entries of ``a`` along axis 0 (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ValueError("gather_rows: index out of range")

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "gather_rows")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # fold leading axes into rows: one GEMM instead of a stacked loop
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make(out, (a, b), bw, "matmul")
    try:
        out = a.data @ b.data
    except ValueError as err:
        raise ValueError(f"matmul: {err}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


# Every op that carries its own backward rule; tests gradcheck each entry.
OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "power": power,
    "square": square,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "clip": clip,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sum": sum,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "gather_rows": gather_rows,
    "matmul": matmul,
}


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable Parameter's ``grad``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad and isinstance(loss, Parameter):
            loss.grad += 1.0
            return
        raise ValueError("backward: loss was not produced on a tape")
    tape, last = loss._node
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: last + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                if isinstance(parent, Parameter):
                    parent.grad += pg
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named parameters with stable insertion order."""

    def __init__(self):
        self._params: OrderedDict[str, Parameter] = OrderedDict()

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(value, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def group(self, prefix: str) -> list[Parameter]:
        return [p for n, p in self._params.items() if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for n, p in self._params.items():
            if snap[n].shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {snap[n].shape} vs {p.shape}")
            p.data[...] = snap[n]

    def manifest(self) -> list[dict]:
        return [{"name": n, "shape": list(p.shape)} for n, p in self._params.items()]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float64 raw file


class CheckpointMismatch(ValueError):
    def __init__(self, diff: list[str]):
        super().__init__("checkpoint does not match architecture:\n  " + "\n  ".join(diff))
        self.diff = diff


def save_checkpoint(arrays: dict[str, np.ndarray], path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.json`` and ``<path>.bin``; returns both paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
    with open(bin_path, "wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                            "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = {"format": "vpp-checkpoint-1", "dtype": "<f8", "data": bin_path.name,
                "parameters": entries}
    json_path.write_text(json.dumps(manifest, indent=2))
    return json_path, bin_path


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    json_path = path.with_suffix(".json")
    manifest = json.loads(json_path.read_text())
    raw = (json_path.parent / manifest["data"]).read_bytes()
    out = OrderedDict()
    for e in manifest["parameters"]:
        chunk = raw[e["offset"]: e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return out


def manifest_diff(store: ParameterStore, arrays: dict[str, np.ndarray]) -> list[str]:
    diff = []
    for name, p in store.items():
        if name not in arrays:
            diff.append(f"missing {name} {list(p.shape)}")
        elif tuple(arrays[name].shape) != p.shape:
            diff.append(f"shape {name}: checkpoint {list(arrays[name].shape)} != model {list(p.shape)}")
    for name in arrays:
        if name not in store:
            diff.append(f"unexpected {name} {list(arrays[name].shape)}")
    return diff


def restore(store: ParameterStore, arrays: dict[str, np.ndarray]) -> None:
    diff = manifest_diff(store, arrays)
    if diff:
        raise CheckpointMismatch(diff)
    store.load_snapshot(arrays)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    n_checked: int
    details: dict = field(default_factory=dict)


def gradcheck(fn: Callable[[], Tensor], params: Iterable[Parameter], h: float = 1e-5,
              rtol: float = 1e-4, floor: float = 1e-6) -> GradcheckReport:
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and must rebuild its value from the current
    contents of ``params``.  The relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    params = list(params)
    saved = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    with Tape():
        loss = fn()
        backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad[...] = g

    worst, worst_name, worst_idx, n = 0.0, None, None, 0
    with no_grad():
        for k, p in enumerate(params):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                a = analytic[k].reshape(-1)[i]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                n += 1
                if rel > worst:
                    worst = rel
                    worst_name = p.name or f"param{k}"
                    worst_idx = np.unravel_index(i, p.shape)
    return GradcheckReport(worst <= rtol, worst, worst_name, worst_idx, n)
