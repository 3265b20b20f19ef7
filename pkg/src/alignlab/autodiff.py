"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine records every differentiable operation on a module-level tape
(a Wengert list). Recording order is execution order, so the tape is
always topologically sorted; ``backward`` replays the contributing
entries once, in reverse. Everything is stored row-major as 64-bit
floats, and any op that produces a NaN or inf raises immediately.

Gradients accumulate across ``backward`` calls until explicitly zeroed
(``zero_grads``), which is what gradient accumulation in the trainer
relies on.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_node_ids = itertools.count()


class Tensor:
    """A dense float64 array with an optional gradient slot.

    ``data`` is always a C-contiguous float64 ndarray. ``grad`` is either
    None or an ndarray of identical shape. ``node_id`` ties the tensor to
    the computation tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keep 0-d scalars 0-d
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience operators; the module-level functions are the API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Entry:
    """One recorded operation: output, inputs, and its backward rule."""

    __slots__ = ("out", "inputs", "rule")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable):
        self.out = out
        self.inputs = inputs
        self.rule = rule


class Tape:
    """Ordered list of recorded operations (a Wengert list)."""

    __slots__ = ("entries", "enabled")

    def __init__(self):
        self.entries: list[_Entry] = []
        self.enabled = True

    def clear(self) -> None:
        self.entries.clear()


_TAPE = Tape()


def tape() -> Tape:
    return _TAPE


def clear_tape() -> None:
    _TAPE.clear()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation/decoding)."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")
    return arr


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    """Wrap a forward result and record it when any input needs grad."""
    out = Tensor(_check_finite(data, op))
    if _TAPE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.entries.append(_Entry(out, inputs, rule))
    return out


def as_tensor(data, requires_grad: bool = False) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Differentiable operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors; dA = g @ B.T, dB = A.T @ g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, "matmul", (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1-D ``b`` broadcasts as a bias over rows of 2-D ``a``."""
    if a.data.shape == b.data.shape:
        def rule(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and b.data.shape[0] == a.data.shape[1]:
        def rule(g):
            return g, g.sum(axis=0)
    else:
        raise ShapeError(f"add shapes incompatible: {a.data.shape} + {b.data.shape}")
    return _make(a.data + b.data, "add", (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes incompatible: {a.data.shape} * {b.data.shape}")

    def rule(g):
        return g * b.data, g * a.data

    return _make(a.data * b.data, "mul", (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def rule(g):
        return (g * c,)

    return _make(x.data * c, "scale", (x,), rule)


def div_scalar(x: Tensor, c: float) -> Tensor:
    """True division by a scalar (kept separate from ``scale`` so that
    equal-ratio quotients round identically)."""
    c = float(c)

    def rule(g):
        return (g / c,)

    return _make(x.data / c, "div_scalar", (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    def rule(g):
        return (np.full_like(x.data, float(g)),)

    return _make(np.asarray(x.data.sum()), "sum_all", (x,), rule)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.data.shape}")

    def rule(g):
        return (np.ascontiguousarray(g.T),)

    return _make(np.ascontiguousarray(x.data.T), "transpose", (x,), rule)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors with equal column counts along the row axis."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    ncols = parts[0].data.shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != ncols:
            raise ShapeError(
                f"concat_rows column mismatch: {[p.data.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def rule(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0),
                 "concat_rows", tuple(parts), rule)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors with equal row counts along the column axis."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    nrows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != nrows:
            raise ShapeError(
                f"concat_cols row mismatch: {[p.data.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def rule(g):
        return tuple(np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]])
                     for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1),
                 "concat_cols", tuple(parts), rule)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.data.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] invalid for shape {x.data.shape}")

    def rule(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return _make(np.ascontiguousarray(x.data[start:stop]), "slice_rows", (x,), rule)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.data.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] invalid for shape {x.data.shape}")

    def rule(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return _make(np.ascontiguousarray(x.data[:, start:stop]), "slice_cols", (x,), rule)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with row-max subtraction for stability."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        # dL/dx = p * (g - sum(g * p, row))
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, "softmax_rows", (x,), rule)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU activation (tanh approximation)."""
    u = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def rule(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
        return (g * dy,)

    return _make(y, "gelu", (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization over the last axis of a 2-D tensor."""
    n = x.data.shape[1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm parameter shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature dim {n}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gain.data + bias.data

    def rule(g):
        gy = g * gain.data
        dx = inv / n * (n * gy
                        - gy.sum(axis=1, keepdims=True)
                        - xhat * (gy * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(y, "layer_norm", (x, gain, bias), rule)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows ``ids`` from an embedding table [V x d]."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {idx.shape}")
    v = table.data.shape[0]
    bad = idx[(idx < 0) | (idx >= v)]
    if bad.size:
        raise IndexError(f"embedding id {int(bad[0])} outside table of size {v}")

    def rule(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return _make(table.data[idx], "embedding_lookup", (table,), rule)


_MASK_NEG = -1e30


def apply_causal_mask(scores: Tensor) -> Tensor:
    """Replace entries above the diagonal of square attention scores with a
    large negative constant so softmax assigns them zero weight."""
    m, n = scores.data.shape
    if m != n:
        raise ShapeError(f"causal mask expects square scores, got {scores.data.shape}")
    allowed = np.tril(np.ones((m, n), dtype=bool))
    out = np.where(allowed, scores.data, _MASK_NEG)

    def rule(g):
        return (np.where(allowed, g, 0.0),)

    return _make(out, "apply_causal_mask", (scores,), rule)


def cross_entropy_masked(logits: Tensor, targets: Sequence[int],
                         mask: Sequence[bool], reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``targets`` over masked-in rows of ``logits``.

    ``reduction`` is "mean" (default: mean over masked-in positions) or
    "sum". An all-false mask is a degenerate loss and raises.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.data.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    msk = np.asarray(mask, dtype=bool)
    n, v = logits.data.shape
    if tgt.shape != (n,) or msk.shape != (n,):
        raise ShapeError(
            f"targets/mask of shapes {tgt.shape}/{msk.shape} do not match {n} rows")
    if not msk.any():
        raise ContractError("cross_entropy_masked: empty mask gives a degenerate loss")
    active = tgt[msk]
    bad = active[(active < 0) | (active >= v)]
    if bad.size:
        raise IndexError(f"target id {int(bad[0])} outside vocabulary of size {v}")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    nll = logz - z[np.arange(n), tgt]
    count = int(msk.sum())
    total = nll[msk].sum()
    value = total / count if reduction == "mean" else total

    def rule(g):
        p = np.exp(z - logz[:, None])
        p[np.arange(n), tgt] -= 1.0
        p[~msk] = 0.0
        if reduction == "mean":
            p /= count
        return (p * float(g),)

    return _make(np.asarray(value), "cross_entropy_masked", (logits,), rule)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad ancestor of a scalar loss.

    Repeated calls without zeroing accumulate into existing gradients.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    produced: dict[int, int] = {}
    for i, e in enumerate(_TAPE.entries):
        produced[e.out.node_id] = i

    if loss.node_id not in produced:
        # Leaf scalar: nothing upstream of it.
        if loss.requires_grad:
            seed = np.asarray(1.0)
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    # Mark the entries contributing to the loss.
    needed: set[int] = set()
    stack = [produced[loss.node_id]]
    while stack:
        i = stack.pop()
        if i in needed:
            continue
        needed.add(i)
        for t in _TAPE.entries[i].inputs:
            j = produced.get(t.node_id)
            if j is not None:
                stack.append(j)

    # Replay in reverse recording order, accumulating into a per-call map so
    # that a second backward() adds exactly one more contribution everywhere.
    grads: dict[int, np.ndarray] = {loss.node_id: np.asarray(1.0)}
    holders: dict[int, Tensor] = {loss.node_id: loss}
    for i in sorted(needed, reverse=True):
        e = _TAPE.entries[i]
        g_out = grads[e.out.node_id]
        in_grads = e.rule(g_out)
        for t, g in zip(e.inputs, in_grads):
            if not t.requires_grad:
                continue
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + g
            else:
                grads[t.node_id] = g
                holders[t.node_id] = t

    for nid, g in grads.items():
        t = holders[nid]
        if not t.requires_grad:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient during backward")
        t.grad = np.array(g) if t.grad is None else t.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@lru_cache(maxsize=64)
def _sinusoid_block(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    enc.setflags(write=False)
    return enc


def sinusoid_rows(length: int, dim: int) -> Tensor:
    """Constant sinusoidal positional encodings, [length x dim]."""
    return Tensor(_sinusoid_block(length, dim))
