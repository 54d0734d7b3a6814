"""Minimal reverse-mode autodiff over numpy arrays.

Activations carry a leading batch axis. Parameters enter the graph as
unbatched leaves; when a :class:`Tape` is opened with ``per_example=True``
the gradient reaching each parameter leaf keeps the batch axis, so one
backward pass over a summed loss yields every example's gradient.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation, NumericFault

LN_EPS = 1e-5

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dptab_tape", default=None
)


class Tensor:
    """Dense array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "batched", "requires_grad", "is_param", "op", "parents", "backward_fn")

    def __init__(self, data, batched=True, requires_grad=False, is_param=False, op="leaf"):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32, copy=False)
        self.data = arr
        self.batched = batched
        self.requires_grad = requires_grad
        self.is_param = is_param
        self.op = op
        self.parents: tuple = ()
        self.backward_fn: Callable | None = None

    @classmethod
    def param(cls, data, requires_grad=True):
        return cls(data, batched=False, requires_grad=requires_grad, is_param=True, op="param")

    @classmethod
    def input(cls, data):
        return cls(data, batched=True)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, batched={self.batched})"


class Tape:
    """Ordered record of differentiable ops executed inside a ``with`` block."""

    def __init__(self, per_example=False):
        self.per_example = per_example
        self.nodes: list[Tensor] = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def record(self, node: Tensor):
        self.nodes.append(node)


def _finite_check(op, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericFault(op)


def _make(op, data, parents, backward_fn, batched=None):
    _finite_check(op, data)
    if batched is None:
        batched = any(p.batched for p in parents)
    out = Tensor(data, batched=batched, op=op)
    if any(p.requires_grad for p in parents):
        tape = _active_tape.get()
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        if tape is not None:
            tape.record(out)
    return out


def _per_example() -> bool:
    tape = _active_tape.get()
    return tape is not None and tape.per_example


def _reduce_to(g, target: Tensor, out_batched: bool, per_example: bool):
    """Sum a broadcast gradient back down to ``target``'s shape.

    In per-example mode a parameter keeps axis 0 of the gradient.
    """
    shape = target.shape
    keep = per_example and target.is_param and out_batched
    if keep:
        if g.ndim <= len(shape):
            raise ContractViolation(
                f"parameter of shape {shape} cannot receive per-example gradient {g.shape}"
            )
        lead = g.ndim - len(shape)
        if lead > 1:
            g = g.sum(axis=tuple(range(1, lead)), dtype=np.float64)
        axes = tuple(i + 1 for i, s in enumerate(shape) if s == 1 and g.shape[i + 1] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
        return g.astype(target.dtype, copy=False)
    if not target.batched and out_batched and per_example and not target.is_param:
        raise ContractViolation("unbatched intermediate used in a per-example graph")
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.astype(target.dtype, copy=False)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32), batched=False)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor, trans_b=False) -> Tensor:
    """``a @ b`` (or ``a @ b.T``) with 64-bit accumulation."""
    a, b = _as_tensor(a), _as_tensor(b)
    bd = b.data.swapaxes(-1, -2) if trans_b else b.data
    if a.shape[-1] != bd.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {bd.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    out_data = np.matmul(a.data.astype(np.float64, copy=False), bd.astype(np.float64, copy=False)).astype(dtype, copy=False)
    out_batched = a.batched or b.batched
    pe = _per_example()

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(np.matmul(g64, bd.astype(np.float64, copy=False).swapaxes(-1, -2)), a, True, pe)
        if b.requires_grad:
            a64 = a.data.astype(np.float64, copy=False)
            if b.is_param and b.data.ndim == 2 and out_batched:
                k, m = a.shape[-1], g.shape[-1]
                if pe and a.data.ndim == 2:
                    gb = np.einsum("bk,bm->bkm", a64, g64)
                    if trans_b:
                        gb = gb.swapaxes(1, 2)
                elif pe:
                    n = a.shape[0]
                    gb = np.matmul(a64.reshape(n, -1, k).swapaxes(1, 2), g64.reshape(n, -1, m))
                    if trans_b:
                        gb = gb.swapaxes(1, 2)
                else:
                    gb = a64.reshape(-1, k).T @ g64.reshape(-1, m)
                    if trans_b:
                        gb = gb.T
                gb = gb.astype(b.dtype, copy=False)
            else:
                full = np.matmul(a64.swapaxes(-1, -2), g64)
                if trans_b:
                    full = full.swapaxes(-1, -2)
                gb = _reduce_to(full, b, out_batched, pe)
        return ga, gb

    return _make("matmul", out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_batched = a.batched or b.batched
    pe = _per_example()

    def backward(g):
        return (
            _reduce_to(g, a, out_batched, pe) if a.requires_grad else None,
            _reduce_to(g, b, out_batched, pe) if b.requires_grad else None,
        )

    return _make("add", a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_batched = a.batched or b.batched
    pe = _per_example()

    def backward(g):
        return (
            _reduce_to(g * b.data, a, out_batched, pe) if a.requires_grad else None,
            _reduce_to(g * a.data, b, out_batched, pe) if b.requires_grad else None,
        )

    return _make("mul", a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = np.asarray(c, dtype=a.dtype)

    def backward(g):
        return (g * c_arr,)

    return _make("scale", a.data * c_arr, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make("relu", a.data * mask, (a,), backward)


def softmax(a: Tensor, axis=-1) -> Tensor:
    x = a.data.astype(np.float64, copy=False)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s64 = e / e.sum(axis=axis, keepdims=True)
    s = s64.astype(a.dtype, copy=False)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        dot = (g64 * s64).sum(axis=axis, keepdims=True)
        return ((s64 * (g64 - dot)).astype(a.dtype, copy=False),)

    return _make("softmax", s, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply elementwise scale and shift."""
    gamma, beta = _as_tensor(gamma), _as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape[-1] != n or beta.shape[-1] != n:
        raise ContractViolation(f"layer_norm affine size {gamma.shape} vs input {x.shape}")
    x64 = x.data.astype(np.float64, copy=False)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    dtype = x.dtype
    out = (xhat * gamma.data.astype(np.float64, copy=False) + beta.data.astype(np.float64, copy=False)).astype(dtype, copy=False)
    out_batched = x.batched
    pe = _per_example()

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        gx = gg = gbeta = None
        if x.requires_grad:
            gh = g64 * gamma.data.astype(np.float64, copy=False)
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            gx = gx.astype(dtype, copy=False)
        if gamma.requires_grad:
            gg = _reduce_to(g64 * xhat, gamma, out_batched, pe)
        if beta.requires_grad:
            gbeta = _reduce_to(g64, beta, out_batched, pe)
        return gx, gg, gbeta

    return _make("layer_norm", out, (x, gamma, beta), backward)


def gather(table: Tensor, idx) -> Tensor:
    """Embedding lookup: ``table[idx]`` for an integer index array."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractViolation("gather indices must be integers")
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise ContractViolation(f"gather index out of range for table of {v} rows")
    pe = _per_example()

    def backward(g):
        if pe and table.is_param:
            n = idx.shape[0]
            out = np.zeros((n,) + table.shape, dtype=np.float64)
            if idx.ndim == 1:  # one lookup per example, so no collisions
                out[np.arange(n), idx] = g
                return (out,)
            rows = np.broadcast_to(np.arange(n).reshape((n,) + (1,) * (idx.ndim - 1)), idx.shape)
            np.add.at(out, (rows, idx), g)
        else:
            out = np.zeros(table.shape, dtype=np.float64)
            np.add.at(out, idx, g)
        return (out.astype(table.dtype, copy=False),)

    return _make("gather", table.data[idx], (table,), backward, batched=True)


def concat(parts: Sequence[Tensor], axis=-1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ax = axis % parts[0].data.ndim
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if p.requires_grad else None
            for i, p in enumerate(parts)
        )

    try:
        data = np.concatenate([p.data for p in parts], axis=ax)
    except ValueError as exc:
        raise ContractViolation(f"concat shape mismatch: {exc}") from None
    return _make("concat", data, tuple(parts), backward)


def reshape(a: Tensor, shape) -> Tensor:
    if a.batched and shape[0] not in (a.shape[0], -1):
        raise ContractViolation("reshape may not mix the batch axis")
    orig = a.shape

    def backward(g):
        return (g.reshape(orig),)

    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractViolation(str(exc)) from None
    return _make("reshape", data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    if a.batched and axes[0] != 0:
        raise ContractViolation("transpose may not move the batch axis")
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _make("transpose", a.data.transpose(axes), (a,), backward)


def sigmoid_bce(logits: Tensor, labels) -> Tensor:
    """Per-example binary cross entropy on raw logits, shape ``(B,)``."""
    y = np.asarray(labels, dtype=np.float64)
    if logits.data.ndim != 1 or y.shape != logits.shape:
        raise ContractViolation(f"sigmoid_bce expects (B,) logits and labels, got {logits.shape}")
    z = logits.data.astype(np.float64, copy=False)
    # max(z,0) - z*y + log(1 + exp(-|z|))
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = 0.5 * (1.0 + np.tanh(0.5 * z))

    def backward(g):
        return ((g * (p - y)).astype(logits.dtype, copy=False),)

    return _make("sigmoid_bce", loss.astype(logits.dtype, copy=False), (logits,), backward)


def sum_all(a: Tensor) -> Tensor:
    """Reduce every axis, batch included, to a scalar."""
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=False),)

    return _make("sum", np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype), (a,), backward,
                 batched=False)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate from ``loss`` through the tape; returns grads keyed by ``id``."""
    if loss.data.size != 1 or loss.batched:
        raise ContractViolation(f"loss must be an unbatched scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def grad(tape: Tape, loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to the named leaves.

    Leaves the loss does not reach get zeros. In a per-example tape each
    array has an extra leading batch axis.
    """
    found = backward(tape, loss)
    out = {}
    for name, leaf in wrt.items():
        g = found.get(id(leaf))
        if g is None:
            shape = leaf.shape
            if tape.per_example:
                raise ContractViolation(f"parameter {name} unreachable in per-example graph")
            g = np.zeros(shape, dtype=leaf.dtype)
        _finite_check(f"grad:{name}", g)
        out[name] = np.asarray(g, dtype=leaf.dtype)
    return out


def per_example_grads_stacked(
    apply: Callable[[Mapping[str, Tensor], object], Tensor],
    batch,
    params: Mapping[str, np.ndarray],
    batch_size: int,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Per-example float64 gradients as ``{name: (B, *shape)}`` plus per-example losses.

    ``apply(leaves, batch)`` must return a ``(B,)`` tensor of per-example losses
    with no interaction between examples.
    """
    if batch_size < 1:
        raise ContractViolation("per-example gradients need a non-empty batch")
    leaves = {k: Tensor.param(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
    with Tape(per_example=True) as tape:
        losses = apply(leaves, batch)
        if losses.shape != (batch_size,):
            raise ContractViolation(f"apply must return ({batch_size},) losses, got {losses.shape}")
        total = sum_all(losses)
    found = backward(tape, total)
    out = {}
    for name, leaf in leaves.items():
        g = found.get(id(leaf))
        if g is None:
            g = np.zeros((batch_size,) + leaf.shape, dtype=leaf.dtype)
        elif g.shape != (batch_size,) + leaf.shape:
            raise ContractViolation(f"per-example gradient for {name} has shape {g.shape}")
        _finite_check(f"grad:{name}", g)
        out[name] = g
    return out, losses.data.copy()


def per_example_grads(apply, batch, params, batch_size) -> list[dict[str, np.ndarray]]:
    """List of ``batch_size`` gradient maps, entry ``i`` for example ``i`` alone."""
    stacked, _ = per_example_grads_stacked(apply, batch, params, batch_size)
    return [{k: v[i] for k, v in stacked.items()} for i in range(batch_size)]
