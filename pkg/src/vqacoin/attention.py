"""Question self-attention and low-rank bilinear attention glimpses.

Tensors carry a leading batch axis.  Masks are boolean arrays that are True
at real (non-pad) positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import DimensionError
from .layers import Linear, Module, WeightNormLinear


def _full_mask(x: Tensor) -> np.ndarray:
    return np.ones(x.shape[:2], dtype=bool)


@dataclass
class AttentionMap:
    """Normalized weights over (row, col) pairs, with optional axis labels."""

    weights: np.ndarray
    row_labels: list[str] = field(default_factory=list)
    col_labels: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "rows": list(self.row_labels),
            "cols": list(self.col_labels),
            "weights": np.asarray(self.weights, dtype=float).tolist(),
        }


class SelfAttentionHead(Module):
    """Per-word weights from a question's own hidden states.

    ``q`` and ``v`` are two weight-normalized ReLU projections of the
    hidden states; their elementwise product is scored by a plain linear
    map and softmaxed over word positions.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64):
        self.fc_q = WeightNormLinear(dim, dim, rng, dtype)
        self.fc_v = WeightNormLinear(dim, dim, rng, dtype)
        self.fc_score = Linear(dim, 1, rng, dtype, bias=False)

    def scores(self, hidden: Tensor) -> Tensor:
        q = dm.relu(self.fc_q(hidden))
        v = dm.relu(self.fc_v(hidden))
        y = dm.hadamard(q, v)
        logits = self.fc_score(dm.relu(y))
        return dm.reshape(logits, logits.shape[:-1])

    def __call__(self, hidden: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        return self_attend(hidden, self, mask)


def self_attend(hidden: Tensor, head: SelfAttentionHead, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(context, weights)``; ``context[i] = weights[i] * hidden[i]``.

    Accepts ``[n, d]`` or ``[B, n, d]``.  The context stays a sequence;
    summing it over positions gives the usual weighted-sum vector.
    """
    single = hidden.ndim == 2
    h = dm.reshape(hidden, (1,) + hidden.shape) if single else hidden
    if mask is None:
        mask = _full_mask(h)
    mask = np.asarray(mask, dtype=bool).reshape(h.shape[:2])
    weights = dm.softmax(head.scores(h), axis=-1, mask=mask)
    context = h * dm.expand_dims(weights, -1)
    if single:
        return dm.reshape(context, hidden.shape), dm.reshape(weights, hidden.shape[:1])
    return context, weights


class BilinearGlimpse(Module):
    """One bilinear attention map plus the joint feature it pools.

    Map path: ``x -> relu(U x)``, ``y -> relu(V y)``, pair logit is
    ``p . (relu(U x_i) * relu(V y_j))``.  Feature path uses separate
    projections ``U'`` and ``V'`` of width ``d_out``.
    """

    def __init__(self, d_x: int, d_y: int, d_h: int, d_out: int, rng: np.random.Generator, dtype=np.float64):
        self.u = WeightNormLinear(d_x, d_h, rng, dtype)
        self.v = WeightNormLinear(d_y, d_h, rng, dtype)
        self.p = Linear(d_h, 1, rng, dtype, bias=False)
        self.u_out = WeightNormLinear(d_x, d_out, rng, dtype)
        self.v_out = WeightNormLinear(d_y, d_out, rng, dtype)
        self.d_out = d_out

    def zero_(self) -> "BilinearGlimpse":
        """Zero every gain, weight and bias (projections then output zeros)."""
        for layer in (self.u, self.v, self.u_out, self.v_out):
            layer.gain.data[:] = 0.0
            layer.bias.data[:] = 0.0
        self.p.weight.data[:] = 0.0
        return self

    def __call__(self, x, y, x_mask=None, y_mask=None):
        return bilinear_attend(x, y, self, x_mask, y_mask)


def bilinear_attend(
    x: Tensor,
    y: Tensor,
    glimpse: BilinearGlimpse,
    x_mask: np.ndarray | None = None,
    y_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Return ``(joint, attention)`` for ``x`` (``[B,N,dx]``) and ``y`` (``[B,M,dy]``).

    ``attention`` is ``[B, N, M]``, one softmax over all unmasked pairs per
    batch item; ``joint[k] = sum_ij A[i,j] relu(U'x_i)[k] relu(V'y_j)[k]``.
    Unbatched 2-D inputs return unbatched outputs.
    """
    single = x.ndim == 2
    if single:
        x = dm.reshape(x, (1,) + x.shape)
        y = dm.reshape(y, (1,) + y.shape)
    if x.ndim != 3 or y.ndim != 3 or x.shape[0] != y.shape[0]:
        raise DimensionError(f"bilinear_attend: incompatible inputs {x.shape} and {y.shape}")
    bsz, n, m = x.shape[0], x.shape[1], y.shape[1]
    xm = _full_mask(x) if x_mask is None else np.asarray(x_mask, dtype=bool).reshape(bsz, n)
    ym = _full_mask(y) if y_mask is None else np.asarray(y_mask, dtype=bool).reshape(bsz, m)

    xa = dm.relu(glimpse.u(x))
    ya = dm.relu(glimpse.v(y))
    p = dm.reshape(glimpse.p.weight, (glimpse.p.weight.shape[0],))
    logits = dm.matmul(xa * p, dm.swapaxes(ya, -1, -2))
    pair_mask = (xm[:, :, None] & ym[:, None, :]).reshape(bsz, n * m)
    att = dm.softmax(dm.reshape(logits, (bsz, n * m)), axis=-1, mask=pair_mask)
    att = dm.reshape(att, (bsz, n, m))

    xo = dm.relu(glimpse.u_out(x))
    yo = dm.relu(glimpse.v_out(y))
    joint = dm.reduce_sum(xo * dm.matmul(att, yo), axis=1)
    if single:
        return dm.reshape(joint, joint.shape[1:]), dm.reshape(att, (n, m))
    return joint, att


GlimpseHook = Callable[[int, Tensor, Tensor], Tensor]


def glimpse_stack(
    x: Tensor,
    q0: Tensor,
    glimpses: Sequence[BilinearGlimpse],
    x_mask: np.ndarray | None = None,
    q_mask: np.ndarray | None = None,
    post_glimpse: Optional[GlimpseHook] = None,
) -> tuple[Tensor, list[Tensor]]:
    """Apply glimpses in turn, adding each joint vector to every question row.

    ``post_glimpse(g, joint, attention)`` may return a replacement joint
    vector; it is where a counting feature would be merged in.
    """
    if not glimpses:
        raise DimensionError("glimpse_stack needs at least one glimpse")
    q = q0
    maps = []
    for g, glimpse in enumerate(glimpses):
        joint, att = bilinear_attend(x, q, glimpse, x_mask, q_mask)
        if post_glimpse is not None:
            joint = post_glimpse(g, joint, att)
        q = dm.broadcast_add(q, joint)
        maps.append(att)
    return q, maps


def si_branch(
    si_states: Tensor,
    context: Tensor,
    glimpse: BilinearGlimpse,
    si_mask: np.ndarray | None = None,
    q_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """One glimpse over (SI word, question word) pairs, added back onto the context."""
    if glimpse.d_out != context.shape[-1]:
        raise DimensionError(f"si_branch: glimpse width {glimpse.d_out} != context width {context.shape[-1]}")
    joint, att = bilinear_attend(si_states, context, glimpse, si_mask, q_mask)
    return dm.broadcast_add(context, joint), att
