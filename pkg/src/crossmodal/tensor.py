"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward operation builds part of an implicit computation graph: the
result node keeps references to its parents, a creation sequence number and
a closure that propagates gradients to those parents. ``Tensor.backward``
walks the part of the graph reachable from the loss in reverse creation
order, which is a valid topological order because operands always exist
before their results. Gradient accumulation is additive, so an input that
feeds several consumers receives the sum of the per-path gradients.

Operations that would overflow in a naive formulation (softmax,
log_softmax, softplus) use max-subtraction rewrites so that finite inputs
always produce finite outputs. Storage is row-major float64 throughout;
there is no broadcasting beyond numpy's rules, and gradients are summed
back down to each input's shape.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, NumericError

_CREATION_COUNTER = itertools.count()

# Test instrumentation: set to a callable to observe backward visit order.
_backward_trace: Callable[["Tensor"], None] | None = None

# Negative-control fixture for the gradient checker: scaling this breaks
# matmul's left-input gradient on purpose. Must stay 1.0 in real use.
_matmul_grad_fudge = 1.0


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._order = next(_CREATION_COUNTER)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        """Propagate gradients from this scalar to every reachable input.

        Visits each reachable grad-requiring node exactly once, in reverse
        creation order.
        """
        if self.data.size != 1:
            raise DimensionError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[Tensor] = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._order, reverse=True)
        self.grad = np.ones_like(self.data)
        for node in nodes:
            if _backward_trace is not None:
                _backward_trace(node)
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap ``data`` as a leaf tensor."""
    return Tensor(data, requires_grad=requires_grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Create an operation result node; skips bookkeeping when no parent needs grads."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, -g)

    return _make(-x.data, (x,), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accumulate(x, g * c)

    return _make(x.data * c, (x,), backward)


def add_const(x: Tensor, c) -> Tensor:
    """Add a constant scalar or array; the constant must broadcast into x's shape."""
    c = np.asarray(c, dtype=np.float64)
    out = x.data + c
    if out.shape != x.data.shape:
        raise DimensionError(
            f"add_const: constant shape {c.shape} does not broadcast into {x.shape}"
        )

    def backward(g):
        _accumulate(x, g)

    return _make(out, (x,), backward)


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or array broadcastable into x's shape."""
    c = np.asarray(c, dtype=np.float64)
    out = x.data * c
    if out.shape != x.data.shape:
        raise DimensionError(
            f"mul_const: constant shape {c.shape} does not broadcast into {x.shape}"
        )

    def backward(g):
        _accumulate(x, g * c)

    return _make(out, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree: {a.shape} x {b.shape}"
        )

    def backward(g):
        _accumulate(a, (g @ b.data.T) * _matmul_grad_fudge)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {x.shape}")

    def backward(g):
        _accumulate(x, g.T)

    return _make(x.data.T.copy(), (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Stable in both tails.
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, g / x.data)

    return _make(np.log(x.data), (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = np.empty_like(x.data)
    pos = x.data >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    sig[~pos] = e / (1.0 + e)

    def backward(g):
        _accumulate(x, g * sig)

    return _make(out, (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient flows only through unclamped entries."""
    inside = (x.data > lo) & (x.data < hi)

    def backward(g):
        _accumulate(x, g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


# ---------------------------------------------------------------------------
# Reductions and normalizers


def softmax(x: Tensor, axis: int) -> Tensor:
    """Exp-normalize along ``axis`` with max subtraction for stability."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(x, out * (g - dot))

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        _accumulate(x, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each vector along the last axis to mean 0, variance 1, then apply gain and bias."""
    if eps <= 0:
        raise DimensionError("layer_norm: eps must be positive")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (dxhat - m1 - xhat * m2))
        lead = tuple(range(x.data.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))

    return _make(out, (x, gain, bias), backward)


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    n = x.data.shape[axis]

    def backward(g):
        _accumulate(x, np.expand_dims(g, axis) / n)

    return _make(x.data.mean(axis=axis), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make(np.asarray(x.data.sum()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# Structural ops


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([x.data for x in xs], axis=axis)
    extents = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum([0] + extents)

    def backward(g):
        for x, start, stop in zip(xs, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            _accumulate(x, g[tuple(index)])

    return _make(out, tuple(xs), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"slice_cols expects a 2-d tensor, got {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accumulate(x, full)

    return _make(x.data[:, start:stop].copy(), (x,), backward)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows by index; duplicate indices accumulate gradient additively."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _make(x.data[idx], (x,), backward)


def gather_elements(x: Tensor, rows, cols) -> Tensor:
    """Pick x[rows[i], cols[i]] as a 1-d tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols), g)
        _accumulate(x, full)

    return _make(x.data[rows, cols].copy(), (x,), backward)


def linear_select(h: Tensor, w: Tensor, b: Tensor, rows, cols) -> Tensor:
    """Score selected (row, word) pairs without forming the full logit matrix.

    out[i, j] = h[rows[i]] . w[:, cols[i, j]] + b[cols[i, j]]

    This is the sparse evaluation path for sampled-candidate losses; it must
    agree exactly with gathering from ``h @ w + b``.
    """
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if cols.ndim != 2 or rows.ndim != 1 or rows.shape[0] != cols.shape[0]:
        raise DimensionError(
            f"linear_select: rows {rows.shape} and cols {cols.shape} must be [m] and [m, c]"
        )
    hm = h.data[rows]                       # [m, d]
    wc = w.data[:, cols]                    # [d, m, c]
    out = np.einsum("md,dmc->mc", hm, wc) + b.data[cols]

    def backward(g):
        dh_rows = np.einsum("mc,dmc->md", g, wc)
        dh = np.zeros_like(h.data)
        np.add.at(dh, rows, dh_rows)
        _accumulate(h, dh)
        contrib = (hm[:, None, :] * g[:, :, None]).reshape(-1, h.data.shape[1])
        dwt = np.zeros((w.data.shape[1], w.data.shape[0]))
        np.add.at(dwt, cols.reshape(-1), contrib)
        _accumulate(w, dwt.T)
        db = np.zeros_like(b.data)
        np.add.at(db, cols.reshape(-1), g.reshape(-1))
        _accumulate(b, db)

    return _make(out, (h, w, b), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)

    def backward(g):
        _accumulate(x, g * mask)

    return _make(x.data * mask, (x,), backward)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    n_samples: int = 40,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` maps named leaf tensors to a scalar loss and must be
    deterministic for fixed inputs. Returns the worst relative error over
    ``n_samples`` randomly chosen parameter coordinates.
    """
    if not 1e-6 <= h <= 1e-4:
        raise NumericError(f"grad_check: step {h} outside [1e-6, 1e-4]")
    rng = rng if rng is not None else np.random.default_rng(0)

    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss = loss_fn(leaves)
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite loss at the base point")
    loss.backward()
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in leaves.items()
    }

    keys = sorted(params)
    sizes = np.array([params[k].size for k in keys])
    cum = np.cumsum(sizes)
    total = int(cum[-1])

    def eval_at(key: str, flat_idx: int, value: float) -> float:
        probe = {k: v for k, v in params.items()}
        arr = params[key].copy()
        arr.flat[flat_idx] = value
        probe[key] = arr
        out = loss_fn({k: Tensor(v) for k, v in probe.items()})
        val = out.item()
        if not math.isfinite(val):
            raise NumericError(
                f"grad_check: non-finite loss probing {key}[{flat_idx}]"
            )
        return val

    worst = 0.0
    for flat in rng.choice(total, size=min(n_samples, total), replace=False):
        slot = int(np.searchsorted(cum, flat, side="right"))
        key = keys[slot]
        idx = int(flat - (cum[slot] - sizes[slot]))
        base = float(params[key].flat[idx])
        fd = (eval_at(key, idx, base + h) - eval_at(key, idx, base - h)) / (2.0 * h)
        ad = float(grads[key].flat[idx])
        scale_ref = max(abs(ad), abs(fd))
        if scale_ref < 1e-10:
            err = abs(ad - fd)
        else:
            err = abs(ad - fd) / scale_ref
        worst = max(worst, err)
    return worst
