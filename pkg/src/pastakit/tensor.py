"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable op records a node when at least one input requires a
gradient. ``backward`` linearizes the reachable nodes into a :class:`Tape`
and replays their backward rules in reverse order, accumulating into the
``grad`` of leaf tensors that require it.
"""
from __future__ import annotations

import contextlib
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
SNAPSHOT_MAGIC = b"PASTATNS"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    # maps the output gradient to one gradient per input (None = no contribution)
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out._node = _Node(out, inputs, rule) if out.requires_grad else None
    return out


class Tape:
    """Topologically ordered list of the operations reachable from one output."""

    def __init__(self, nodes: list[_Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        order: list[_Node] = []
        seen: set[int] = set()
        if out._node is None:
            return cls(order)
        # iterative post-order DFS; inputs always precede their consumers
        stack: list[tuple[_Node, bool]] = [(out._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append((t._node, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed_grad: np.ndarray) -> None:
        if not self.nodes:
            return
        grads: dict[int, np.ndarray] = {id(self.nodes[-1].output): seed_grad}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.rule(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if t._node is None:
                    if key in leaves:
                        leaves[key] = (t, leaves[key][1] + gi)
                    else:
                        leaves[key] = (t, gi)
                elif key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for t, g in leaves.values():
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    Tape.from_output(loss).replay(np.ones_like(loss.data))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _rowsum(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a vector added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    bdim = b.ndim if a.shape != b.shape else -1

    def rule(g):
        return g, (_rowsum(g) if bdim == 1 else g)

    return _record(a.data + b.data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)

    def rule(g):
        return (g * (cdf + x.data * pdf),)

    return _record(x.data * cdf, (x,), rule)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def rule(g):
        return (g @ b.data.T if a.requires_grad else None, a.data.T @ g if b.requires_grad else None)

    return _record(a.data @ b.data, (a, b), rule)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over matching leading dimensions: [..., m, k] x [..., k, n]."""
    if (
        a.ndim < 3
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _record(y, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


# ---------------------------------------------------------------- normalization

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax. NaN inputs propagate to NaN outputs."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma * x + beta``."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def rule(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (
            dx,
            _rowsum(g * xhat) if gamma.requires_grad else None,
            _rowsum(g) if beta.requires_grad else None,
        )

    return _record(y, (x, gamma, beta), rule)


# ---------------------------------------------------------------- indexing

def gather(x: Tensor, index) -> Tensor:
    """Basic or advanced numpy indexing with a scatter-add backward."""
    shape = x.shape

    def rule(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _record(np.array(x.data[index], dtype=DTYPE), (x,), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return gather(table, ids)


def scatter_rows(shape: Sequence[int], vectors: Sequence[Tensor], rows: Sequence[Sequence[tuple]]) -> Tensor:
    """Zero tensor of ``shape`` whose rows ``rows[j]`` all hold ``vectors[j]``.

    Each entry of ``rows[j]`` is an index tuple addressing one last-axis row.
    The gradient of ``vectors[j]`` is the sum of the output gradients at its rows.
    """
    shape = tuple(shape)
    out = np.zeros(shape, dtype=DTYPE)
    flat: list[tuple[np.ndarray, ...] | None] = []
    for vec, where in zip(vectors, rows):
        if vec.shape != (shape[-1],):
            raise ShapeError(f"scatter_rows: vector shape {vec.shape} does not match row width {shape[-1]}")
        if not where:
            flat.append(None)
            continue
        idx = tuple(np.array(axis, dtype=np.int64) for axis in zip(*where))
        out[idx] = vec.data
        flat.append(idx)

    def rule(g):
        return [None if idx is None else g[idx].sum(axis=0) for idx in flat]

    return _record(out, tuple(vectors), rule)


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean softmax cross-entropy over rows whose label is not ``ignore_index``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {logits.shape[0]} rows")
    keep = labels != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every label is ignored")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, labels[rows]].sum() / n

    def rule(g):
        p = np.exp(logp)
        p[rows, labels[rows]] -= 1.0
        p[~keep] = 0.0
        return (p * (g / n),)

    return _record(np.array(loss), (logits,), rule)


# ---------------------------------------------------------------- snapshots

def _write_header(fh, magic: bytes, header: dict) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(magic)
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)


def _read_header(fh, magic: bytes) -> dict:
    got = fh.read(len(magic))
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")
    (n,) = struct.unpack("<Q", fh.read(8))
    return json.loads(fh.read(n).decode("utf-8"))


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    buf = io.BytesIO()
    _write_header(buf, SNAPSHOT_MAGIC, {"shape": list(arr.shape), "dtype": "f64"})
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_tensor(path: str | Path, t: Tensor | np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path: str | Path, requires_grad: bool = False) -> Tensor:
    with open(path, "rb") as fh:
        header = _read_header(fh, SNAPSHOT_MAGIC)
        if header.get("dtype") != "f64":
            raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
        shape = tuple(header["shape"])
        count = math.prod(shape)
        payload = fh.read(count * 8)
        if len(payload) != count * 8:
            raise ValueError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(shape)
    return Tensor(arr, requires_grad=requires_grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
