"""Dense tensors with tape-based reverse-mode differentiation.

Every op computes its forward value with numpy and, when a :class:`Tape` is
active and at least one input requires a gradient, appends an entry holding
the vector-Jacobian product closure.  :func:`backward` replays the tape in
reverse.  Outside a tape the ops are plain numpy calls, which is what the
inference paths use.
"""

from __future__ import annotations

import functools
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype: str | None = None, name: str | None = None):
        if dtype is not None:
            arr = np.asarray(data, dtype=DTYPES[dtype])
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> str:
        return "f64" if self.data.dtype == np.float64 else "f32"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


@dataclass
class TapeEntry:
    index: int
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.entries)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _finite_guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            return fn(*args, **kwargs)

    return wrapper


def record(op: str, inputs: Iterable[Tensor], out: np.ndarray, vjp) -> Tensor:
    """Wrap ``out`` in a Tensor and register it on the active tape if needed.

    Custom differentiable ops (the CTC loss, for one) go through here too.
    """
    inputs = tuple(inputs)
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.entries.append(TapeEntry(len(tape.entries), op, inputs, result, vjp))
    return result


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every participating leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ValueError("no tape to differentiate")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(e.output) for e in tape.entries}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, ig in zip(entry.inputs, entry.vjp(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig
            if key not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _unbias(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


@_finite_guard
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    if b.ndim == 2:
        out = A @ B
        k, n = B.shape

        def vjp(g):
            return g @ B.T, A.reshape(-1, k).T @ g.reshape(-1, n)

    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        out = A @ B

        def vjp(g):
            return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    else:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    return record("matmul", (a, b), out, vjp)


@_finite_guard
def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-axis bias vector or a scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        return record("add_scalar", (a,), a.data + c, lambda g: (g,))
    if a.shape == b.shape:
        return record("add", (a, b), a.data + b.data, lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        return record("add_bias", (a, b), a.data + b.data, lambda g: (g, _unbias(g, n)))
    raise DimensionError(f"add: {a.shape} + {b.shape}")


@_finite_guard
def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} - {b.shape}")
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


@_finite_guard
def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return record("mul_scalar", (a,), a.data * c, lambda g: (g * c,))
    if a.shape != b.shape:
        raise DimensionError(f"mul: {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return record("mul", (a, b), A * B, lambda g: (g * B, g * A))


@_finite_guard
def add_constant(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array (attention masks); numpy broadcasting applies."""
    out = a.data + c.astype(a.data.dtype, copy=False)
    if out.shape != a.shape:
        raise DimensionError(f"add_constant would broadcast {a.shape} to {out.shape}")
    return record("add_constant", (a,), out, lambda g: (g,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(str(err)) from None
    return record("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record("transpose", (a,), out, lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrays = [t.data for t in tensors]
    sizes = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    out = np.concatenate(arrays, axis=axis)

    def vjp(g):
        return np.split(g, sizes, axis=axis)

    return record("concat", tensors, out, vjp)


def select(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the leading axis."""
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return record("select", (x,), x.data[i], vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", (a,), a.data * mask, lambda g: (g * mask,))


@_finite_guard
def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


@_finite_guard
def log(a: Tensor) -> Tensor:
    A = a.data
    return record("log", (a,), np.log(A), lambda g: (g / A,))


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (a,), np.asarray(out), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis), 1.0 / n)


@_finite_guard
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), y, vjp)


@_finite_guard
def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", (x,), out, vjp)


@_finite_guard
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    G = gain.data
    out = xhat * G + bias.data

    def vjp(g):
        gx = g * G
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbias(g * xhat, d), _unbias(g, d)

    return record("layer_norm", (x, gain, bias), out, vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    V, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range for table of {V} rows")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return record("embedding", (table,), out, vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def nll(logp: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """``-sum(weights * logp[..., targets])`` as a scalar."""
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=logp.data.dtype)
    if logp.shape[:-1] != targets.shape or targets.shape != weights.shape:
        raise DimensionError(f"nll: logp {logp.shape}, targets {targets.shape}, weights {weights.shape}")
    picked = np.take_along_axis(logp.data, targets[..., None], axis=-1)[..., 0]
    out = np.asarray(-(weights * picked).sum())

    def vjp(g):
        gl = np.zeros_like(logp.data)
        np.put_along_axis(gl, targets[..., None], (-g * weights)[..., None], axis=-1)
        return (gl,)

    return record("nll", (logp,), out, vjp)


def save_checkpoint(prefix: str | Path, tensors: dict[str, Tensor | np.ndarray], extra: dict | None = None) -> Path:
    """Write ``<prefix>.json`` (manifest) and ``<prefix>.bin`` (little-endian blob)."""
    prefix = Path(prefix)
    blob_path = prefix.with_suffix(".bin")
    entries, offset = [], 0
    with open(blob_path, "wb") as fh:
        for name, t in tensors.items():
            arr = t.data if isinstance(t, Tensor) else np.asarray(t)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            fh.write(raw)
            entries.append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f64" if arr.dtype == np.float64 else "f32",
                "offset": offset,
                "nbytes": len(raw),
            })
            offset += len(raw)
    manifest = {"blob": blob_path.name, "tensors": entries}
    if extra:
        manifest["extra"] = extra
    manifest_path = prefix.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def load_checkpoint(prefix: str | Path) -> tuple[dict[str, Tensor], dict]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    blob = (prefix.parent / manifest["blob"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        dt = np.dtype(DTYPES[e["dtype"]]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        out[e["name"]] = Tensor(arr.astype(DTYPES[e["dtype"]]).reshape(e["shape"]), name=e["name"])
    return out, manifest.get("extra", {})
