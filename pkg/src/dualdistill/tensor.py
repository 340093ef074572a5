"""Small reverse-mode autodiff over numpy arrays.

Training state is float32. Ops keep the dtype of their inputs, so casting
leaf tensors to float64 gives a 64-bit shadow graph for gradient checks.
Broadcasting is limited to bias-add over the last axis; everything else must
be reshaped explicitly.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Sequence

import numpy as np

from .errors import WorkbenchError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float32
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, op={self.op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Each node is visited once, in reverse topological order; gradients
        from several consumers of one tensor are summed.
        """
        if grad is None:
            if self.data.size != 1:
                raise WorkbenchError("shape-mismatch", "backward() needs a scalar or explicit grad")
            grad = np.ones_like(self.data)
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.dims, x, dtype=like.data.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis."""
    if a.dims == b.dims:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.dims[-1] == b.dims[0]:
        lead = tuple(range(a.ndim - 1))

        def backward(g):
            return g, g.sum(axis=lead)

        return _result(a.data + b.data, (a, b), backward, "add_bias")
    raise WorkbenchError("shape-mismatch", f"add {a.dims} + {b.dims}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise WorkbenchError("shape-mismatch", f"sub {a.dims} - {b.dims}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise WorkbenchError("shape-mismatch", f"mul {a.dims} * {b.dims}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    k = math.sqrt(2.0 / math.pi)
    xd = x.data
    x2 = xd * xd
    inner = k * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = k * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(out, (x,), backward, "gelu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


# --------------------------------------------------------------------------
# shape


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    src = x.dims
    try:
        out = x.data.reshape(dims)
    except ValueError as exc:
        raise WorkbenchError("shape-mismatch", str(exc)) from exc
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.dims[:-2] != b.dims[:-2]
        or a.dims[-1] != b.dims[-2]
    ):
        raise WorkbenchError("shape-mismatch", f"matmul {a.dims} @ {b.dims}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# --------------------------------------------------------------------------
# reductions and normalizations


def sum_all(x: Tensor) -> Tensor:
    dims = x.dims
    return _result(
        np.asarray(x.data.sum(), dtype=x.data.dtype),
        (x,),
        lambda g: (np.full(dims, g, dtype=x.data.dtype),),
        "sum",
    )


def sq_norm(x: Tensor) -> Tensor:
    """Squared Frobenius norm."""
    xd = x.data
    return _result(
        np.asarray(np.vdot(xd, xd), dtype=xd.dtype), (x,), lambda g: (2.0 * g * xd,), "sq_norm"
    )


def softmax_rows(x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, max-subtracted.

    ``key_mask`` (broadcastable to ``x``, nonzero = keep) zeroes out masked
    columns exactly; a row must keep at least one column.
    """
    xd = x.data
    if key_mask is not None:
        keep = np.broadcast_to(key_mask != 0, xd.shape)
        xd = np.where(keep, xd, -np.inf)
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    if gain.dims != (d,) or bias.dims != (d,):
        raise WorkbenchError("shape-mismatch", f"layer_norm {x.dims} with gain {gain.dims}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gg = g * gain.data
        gx = inv * (
            gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward, "layer_norm")


# --------------------------------------------------------------------------
# indexing


def embedding(tables: Sequence[Tensor], ids: np.ndarray, which: np.ndarray | None = None) -> Tensor:
    """Row lookup from one or several tables.

    ``which[i]`` picks the table for ``ids[i]`` (defaults to table 0). The
    result has shape ``ids.shape + (d,)``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    which = np.zeros_like(ids) if which is None else np.asarray(which, dtype=np.int64)
    d = tables[0].dims[1]
    if any(t.ndim != 2 or t.dims[1] != d for t in tables):
        raise WorkbenchError("shape-mismatch", "embedding tables must share width")
    flat_ids = ids.reshape(-1)
    flat_which = which.reshape(-1)
    out = np.empty((flat_ids.size, d), dtype=tables[0].data.dtype)
    selections = []
    for k, table in enumerate(tables):
        sel = np.nonzero(flat_which == k)[0]
        rows = flat_ids[sel]
        if rows.size and (rows.min() < 0 or rows.max() >= table.dims[0]):
            raise WorkbenchError("bad-token-id", f"id outside table {k} of size {table.dims[0]}")
        out[sel] = table.data[rows]
        selections.append((sel, rows))
    if (flat_which < 0).any() or (flat_which >= len(tables)).any():
        raise WorkbenchError("bad-token-id", "table selector out of range")

    def backward(g):
        g2 = g.reshape(-1, d)
        grads = []
        for table, (sel, rows) in zip(tables, selections):
            if not table.requires_grad:
                grads.append(None)
                continue
            gt = np.zeros_like(table.data)
            np.add.at(gt, rows, g2[sel])
            grads.append(gt)
        return tuple(grads)

    return _result(out.reshape(ids.shape + (d,)), tuple(tables), backward, "embedding")


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x[idx]`` for a 2-D ``x``."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2:
        raise WorkbenchError("shape-mismatch", "take_rows needs a matrix")
    n = x.dims[0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise WorkbenchError("shape-mismatch", "row index out of range")
    return _result(x.data[idx], (x,), backward, "take_rows")


# --------------------------------------------------------------------------
# losses


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: Sequence[int], reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over rows of ``logits`` (p x C)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.dims[0],):
        raise WorkbenchError("shape-mismatch", f"logits {logits.dims}, labels {labels.shape}")
    p, c = logits.dims
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise WorkbenchError("bad-label", f"label outside [0, {c})")
    if p == 0:
        return _result(
            np.asarray(0.0, dtype=logits.data.dtype),
            (logits,),
            lambda g: (np.zeros_like(logits.data),),
            "cross_entropy",
        )
    logp = log_softmax_np(logits.data)
    rows = np.arange(p)
    total = -logp[rows, labels].sum()
    denom = p if reduction == "mean" else 1

    def backward(g):
        probs = np.exp(logp)
        probs[rows, labels] -= 1.0
        return (probs * (g / denom),)

    return _result(
        np.asarray(total / denom, dtype=logits.data.dtype), (logits,), backward, "cross_entropy"
    )


# --------------------------------------------------------------------------
# gradient checking


def gradient_check(
    f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6
) -> float:
    """Max relative error between autodiff and central differences.

    The check runs on a float64 copy of ``x``; ``f`` must build its graph
    from whatever tensor it is handed. Relative error per coordinate is
    ``|a - c| / max(|a|, |c|, 1e-8)``.
    """
    if step <= 0:
        raise WorkbenchError("bad-step", "step must be positive")
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    out = f(x64)
    if not np.all(np.isfinite(out.data)):
        raise WorkbenchError("non-finite", "f(x) is not finite")
    out.backward()
    analytic = np.zeros_like(x64.data) if x64.grad is None else x64.grad.copy()

    base = x64.data.copy()
    numeric = np.empty_like(base)
    flat = x64.data.reshape(-1)
    for i in range(flat.size):
        orig = base.reshape(-1)[i]
        flat[i] = orig + step
        fp = float(f(Tensor(x64.data)).data)
        flat[i] = orig - step
        fm = float(f(Tensor(x64.data)).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    if not np.all(np.isfinite(numeric)):
        raise WorkbenchError("non-finite", "finite differences not finite")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max()) if base.size else 0.0
