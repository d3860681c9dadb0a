"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float64 for correctness tests, float32
for the training path). Every op records a backward closure on its output;
``Tensor.backward()`` topologically orders the recorded ops and visits each
exactly once in reverse. Attention tensors follow the [batch, heads, time,
head_size] convention throughout.

All forward ops verify their outputs are finite and raise NonFiniteError
otherwise, so a diverging run fails loudly at the op that produced it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

# Large negative finite logit used for masking: exp() underflows to exactly 0
# in both float32 and float64, without ever materializing an inf.
MASK_VALUE = -1e9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / data generation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class TensorError(ValueError):
    """Shape or usage error in a tensor op."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""

    def __init__(self, op: str, data: np.ndarray):
        bad = int(np.size(data) - np.isfinite(data).sum())
        super().__init__(f"non-finite values after op '{op}' "
                         f"({bad} of {data.size} entries, shape {data.shape})")
        self.op = op


class Tensor:
    """Dense array with an optional gradient slot.

    Frozen tensors (requires_grad=False) never receive a gradient buffer;
    after any backward pass their ``grad`` is still None.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req}, op={self._op})"

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- autograd core ------------------------------------------------------

    def backward(self) -> None:
        """Populate grads of every requires_grad ancestor of a scalar loss."""
        if self.data.size != 1:
            raise TensorError(f"backward() requires a scalar loss, got shape {self.shape}")
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
        # order is topological: parents precede children
        self._ensure_grad()
        self.grad += np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _ensure_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.requires_grad:
            self._ensure_grad()
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor],
            backward: Optional[Callable[[np.ndarray], None]]) -> Tensor:
    """Wrap an op output, checking finiteness and recording the closure."""
    if not np.isfinite(data).all():
        raise NonFiniteError(op, data)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _check_finite_input(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op} (input)", t.data)


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient over broadcast leading dims back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _as_array(x, dtype) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=dtype)


# -- elementwise ops --------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """a + b, broadcasting only over leading dims."""
    bt = b if isinstance(b, Tensor) else None
    bd = _as_array(b, a.dtype)
    data = a.data + bd

    def backward(g: np.ndarray) -> None:
        a._accumulate(_sum_to_shape(g, a.shape))
        if bt is not None:
            bt._accumulate(_sum_to_shape(g, bt.shape))

    return _result("add", data, [a, bt] if bt is not None else [a], backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; scalars and leading-dim broadcast allowed."""
    bt = b if isinstance(b, Tensor) else None
    bd = _as_array(b, a.dtype)
    data = a.data * bd

    def backward(g: np.ndarray) -> None:
        a._accumulate(_sum_to_shape(g * bd, a.shape))
        if bt is not None:
            bt._accumulate(_sum_to_shape(g * a.data, bt.shape))

    return _result("mul", data, [a, bt] if bt is not None else [a], backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with batched broadcasting over leading dims."""
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise TensorError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    _check_finite_input("matmul", a, b)
    data = np.matmul(a.data, b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_sum_to_shape(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_sum_to_shape(gb, b.shape))

    return _result("matmul", data, [a, b], backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def backward(g: np.ndarray) -> None:
        a._accumulate(np.transpose(g, inv))

    return _result("transpose", data, [a], backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    data = a.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        a._accumulate(g.reshape(orig))

    return _result("reshape", data, [a], backward)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries (scalar)."""
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g: np.ndarray) -> None:
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype))

    return _result("sum", data, [a], backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    _check_finite_input("silu", a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward(g: np.ndarray) -> None:
        a._accumulate(g * sig * (1.0 + a.data * (1.0 - sig)))

    return _result("silu", data, [a], backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``."""
    _check_finite_input("softmax", a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    data = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - inner))

    return _result("softmax", data, [a], backward)


RMS_EPS = 1e-6


def rms_norm(a: Tensor, weight: Tensor) -> Tensor:
    """LLaMA-style normalization over the last dim: x / rms(x) * weight."""
    _check_finite_input("rms_norm", a)
    n = a.shape[-1]
    inv = 1.0 / np.sqrt((a.data * a.data).mean(axis=-1, keepdims=True) + RMS_EPS)
    normed = a.data * inv
    data = normed * weight.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            gw = g * weight.data
            dot = (gw * a.data).sum(axis=-1, keepdims=True)
            a._accumulate(gw * inv - a.data * (inv ** 3) * dot / n)
        if weight.requires_grad:
            red = g * normed
            weight._accumulate(red.reshape(-1, n).sum(axis=0))

    return _result("rms_norm", data, [a, weight], backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather: output[..., :] = table[ids[...], :]."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise TensorError(f"embedding ids out of range [0, {table.shape[0]})")
    data = table.data[idx]

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
            table._accumulate(acc)

    return _result("embedding", data, [table], backward)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Token-level cross entropy averaged over active positions.

    ``logits`` is [..., vocab], ``targets`` integer ids of the leading shape,
    ``mask`` a 0/1 array over the same leading shape (None means all ones).
    A mask with zero active positions is an error.
    """
    _check_finite_input("cross_entropy", logits)
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise TensorError(f"targets shape {tgt.shape} vs logits {logits.shape}")
    if mask is None:
        m = np.ones(tgt.shape, dtype=logits.dtype)
    else:
        m = np.asarray(mask, dtype=logits.dtype)
        if m.shape != tgt.shape:
            raise TensorError(f"mask shape {m.shape} vs targets {tgt.shape}")
    active = m.sum()
    if active <= 0:
        raise TensorError("cross_entropy mask has no active positions")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    data = np.asarray(-(picked * m).sum() / active, dtype=logits.dtype)

    def backward(g: np.ndarray) -> None:
        grad = np.exp(logp)
        grad[(*np.indices(tgt.shape), tgt)] -= 1.0
        grad *= (m / active)[..., None]
        logits._accumulate(grad * g)

    return _result("cross_entropy", data, [logits], backward)
