"""Dense tensors with define-by-run reverse-mode differentiation.

Every op runs eagerly on numpy arrays and, when any input tracks gradients,
records a backward closure on its output.  A global sequence number stamps
each recorded node; since a node's inputs always exist before it does,
sorting reachable nodes by descending stamp is a strict reverse topological
order.  That ordering *is* the tape, rebuilt on every forward pass.

Only the operations the VQA network needs are provided.  Leading axes are
treated as batch axes wherever that is natural (matmul, softmax, concat).
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateMaskError, DimensionError, NumericError

MASK_FILL = -1e30

_stamp = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional real array that can take part in gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_stamp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._stamp = next(_stamp)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar; these broadcast like numpy
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op}")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
        "div",
    )


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors (no broadcasting)."""
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes differ, {a.shape} vs {b.shape}")
    return mul(a, b)


def broadcast_add(seq: Tensor, vec: Tensor) -> Tensor:
    """Add ``vec`` (``[..., d]``) to every row of ``seq`` (``[..., n, d]``)."""
    if seq.ndim < 2 or vec.shape != seq.shape[:-2] + seq.shape[-1:]:
        raise DimensionError(f"broadcast_add: cannot add {vec.shape} to rows of {seq.shape}")
    return add(seq, expand_dims(vec, -2))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch extents incompatible, {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    live = x.data > 0
    return _result(np.where(live, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * live,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NumericError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    if (x.data < 0).any():
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


# ---------------------------------------------------------------- shape ops


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in axes:
            if not -x.ndim <= ax < x.ndim:
                raise DimensionError(f"reduce_sum: axis {ax} out of range for shape {x.shape}")
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "reduce_sum")


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis=axis), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return _result(np.expand_dims(x.data, axis), (x,), lambda g: (g.reshape(x.shape),), "expand_dims")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat of zero tensors")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts:
        if p.ndim != nd or p.shape[:ax] + p.shape[ax + 1 :] != parts[0].shape[:ax] + parts[0].shape[ax + 1 :]:
            raise DimensionError(f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tuple(parts), backward, "concat")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (x,), backward, "getitem")


def take_rows(table: Tensor, ids: np.ndarray, frozen_row: int | None = None) -> Tensor:
    """Gather rows of a 2-D table; ``frozen_row`` never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        if frozen_row is not None:
            full[frozen_row] = 0.0
        return (full,)

    return _result(out, (table,), backward, "take_rows")


# ---------------------------------------------------------------- normalizers


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; ``mask`` is True where an entry is live.

    Masked entries get ``MASK_FILL`` added before normalization and come out
    as exact zeros.  A slice with no live entry is an error.
    """
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise DegenerateMaskError("softmax: a slice has every position masked")
        z = z + np.where(mask, 0.0, MASK_FILL).astype(z.dtype, copy=False)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    if mask is not None:
        out = np.where(mask, out, 0.0).astype(x.dtype, copy=False)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy between ``sigmoid(logits)`` and soft targets.

    Averaged over every entry (classes, then batch), using the logit form
    ``max(x,0) - x*t + log(1+exp(-|x|))`` for stability.
    """
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"bce: targets {t.shape} vs logits {logits.shape}")
    if (t < 0).any() or (t > 1).any():
        raise ContractError("bce: soft targets must lie in [0, 1]")
    x = logits.data
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    loss = np.asarray(per.sum() / n, dtype=x.dtype)
    return _result(loss, (logits,), lambda g: (g * (_stable_sigmoid(x) - t) / n,), "bce_with_logits")


# ---------------------------------------------------------------- fused GRU


def gru_scan_op(x: Tensor, h0: Tensor, w: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """Run a GRU over ``x`` (``[B, T, I]``) and return every hidden state.

    Gate blocks are packed along the last axis in the order update, reset,
    candidate: ``w`` is ``[I, 3H]``, ``u`` is ``[H, 3H]``, ``b`` is ``[3H]``.
    ``h0`` is ``[B, H]``.  Backward is hand-written BPTT over the whole scan.
    """
    if x.ndim != 3:
        raise DimensionError(f"gru_scan expects [batch, time, features], got {x.shape}")
    bsz, steps, _ = x.shape
    hid = h0.shape[-1]
    if w.shape != (x.shape[2], 3 * hid) or u.shape != (hid, 3 * hid) or b.shape != (3 * hid,):
        raise DimensionError(
            f"gru_scan: parameter shapes {w.shape}, {u.shape}, {b.shape} do not fit input {x.shape}, hidden {hid}"
        )
    u_zr, u_h = u.data[:, : 2 * hid], u.data[:, 2 * hid :]
    xp = x.data @ w.data + b.data
    hs = np.empty((bsz, steps, hid), dtype=x.dtype)
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    cands = np.empty_like(hs)
    prevs = np.empty_like(hs)
    h = h0.data
    for t in range(steps):
        zr = _stable_sigmoid(xp[:, t, : 2 * hid] + h @ u_zr)
        z, r = zr[:, :hid], zr[:, hid:]
        cand = np.tanh(xp[:, t, 2 * hid :] + (r * h) @ u_h)
        prevs[:, t] = h
        h = h + z * (cand - h)
        zs[:, t], rs[:, t], cands[:, t], hs[:, t] = z, r, cand, h

    def backward(g):
        dxp = np.empty_like(xp)
        du = np.zeros_like(u.data)
        dh_next = np.zeros((bsz, hid), dtype=x.dtype)
        for t in range(steps - 1, -1, -1):
            z, r, cand, hp = zs[:, t], rs[:, t], cands[:, t], prevs[:, t]
            dh = g[:, t] + dh_next
            d_cand_pre = dh * z * (1.0 - cand * cand)
            dz_pre = dh * (cand - hp) * z * (1.0 - z)
            rh = r * hp
            du[:, 2 * hid :] += rh.T @ d_cand_pre
            d_rh = d_cand_pre @ u_h.T
            dr_pre = d_rh * hp * r * (1.0 - r)
            dzr = np.concatenate([dz_pre, dr_pre], axis=1)
            du[:, : 2 * hid] += hp.T @ dzr
            dh_next = dh * (1.0 - z) + d_rh * r + dzr @ u_zr.T
            dxp[:, t, : 2 * hid] = dzr
            dxp[:, t, 2 * hid :] = d_cand_pre
        flat = dxp.reshape(-1, 3 * hid)
        dx = dxp @ w.data.T if x.requires_grad else None
        dw = x.data.reshape(-1, x.shape[2]).T @ flat if w.requires_grad else None
        return dx, dh_next, dw, du, flat.sum(axis=0)

    return _result(hs, (x, h0, w, u, b), backward, "gru_scan")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    ``params``, when given, are guaranteed a ``.grad`` afterwards: zeros for
    any that the loss does not reach.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params) if params is not None else []
    if not loss.requires_grad:
        raise ContractError("backward called on a loss that tracks no gradient")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in sorted(nodes.values(), key=lambda n: n._stamp, reverse=True):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
