"""Trainable building blocks: embeddings, weight-normalized FC, dropout, GRU."""

from __future__ import annotations

from pathlib import Path
from typing import Iterator

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import ConfigError, ContractError, DataError, VocabularyError

PAD_ID = 0
_NORM_FLOOR = 1e-24


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=np.float64) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out)).astype(dtype)


def orthogonal(rng: np.random.Generator, n: int, dtype=np.float64) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.sign(np.diag(r))).astype(dtype)


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Parameter container.  Parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class EmbeddingTable(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, dtype=np.float64):
        if vocab_size < 2 or dim < 1:
            raise ConfigError(f"embedding needs vocab_size >= 2 and dim >= 1, got {vocab_size}, {dim}")
        table = xavier_uniform(rng, vocab_size, dim, dtype=dtype)
        table[PAD_ID] = 0.0
        self.matrix = parameter(table, "embedding")

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __call__(self, ids) -> Tensor:
        return embed(ids, self)

    def load_text_vectors(self, path: str | Path, token_to_id: dict[str, int]) -> int:
        """Overwrite rows from a ``word v1 v2 ...`` text file; returns rows loaded.

        Words missing from ``token_to_id`` are skipped and unmatched rows keep
        their random init.  The pad row is never overwritten.
        """
        loaded = 0
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) < 2:
                    continue
                idx = token_to_id.get(parts[0])
                if idx is None or idx == PAD_ID:
                    continue
                if len(parts) - 1 != self.dim:
                    raise DataError(f"{path}:{lineno}: expected {self.dim} values, got {len(parts) - 1}")
                self.matrix.data[idx] = np.asarray(parts[1:], dtype=self.matrix.dtype)
                loaded += 1
        return loaded


def embed(ids, table: EmbeddingTable) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        bad = ids[(ids < 0) | (ids >= table.vocab_size)].reshape(-1)[0]
        raise VocabularyError(f"token id {int(bad)} outside vocabulary of size {table.vocab_size}")
    return dm.take_rows(table.matrix, ids, frozen_row=PAD_ID)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        self.weight = parameter(xavier_uniform(rng, in_dim, out_dim, dtype=dtype))
        self.bias = parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = dm.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class WeightNormLinear(Module):
    """Linear map whose column j is ``gain[j] * direction[:, j] / ||direction[:, j]||``.

    The normalization is recomputed on every call so updates to either
    factor are always reflected.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64):
        direction = xavier_uniform(rng, in_dim, out_dim, dtype=dtype)
        self.direction = parameter(direction)
        self.gain = parameter(np.linalg.norm(direction, axis=0))
        self.bias = parameter(np.zeros(out_dim, dtype=dtype))

    def effective_weight(self) -> Tensor:
        d = self.direction
        norms = dm.sqrt(dm.reduce_sum(d * d, axis=0) + _NORM_FLOOR)
        return d * (self.gain / norms)

    def __call__(self, x: Tensor) -> Tensor:
        return dm.matmul(x, self.effective_weight()) + self.bias


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


class GruCell(Module):
    """Standard GRU.

    Gates are packed as (update, reset, candidate) blocks of width
    ``hidden_dim`` in ``w`` (input), ``u`` (recurrent) and ``b``.
    """

    GATES = ("z", "r", "h")

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        w = np.concatenate([xavier_uniform(rng, input_dim, hidden_dim, dtype=dtype) for _ in self.GATES], axis=1)
        u = np.concatenate([orthogonal(rng, hidden_dim, dtype=dtype) for _ in self.GATES], axis=1)
        self.w = parameter(w)
        self.u = parameter(u)
        self.b = parameter(np.zeros(3 * hidden_dim, dtype=dtype))

    def gate(self, which: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views ``(W, U, b)`` of one gate, e.g. ``gate("z")``."""
        k = self.GATES.index(which)
        cols = slice(k * self.hidden_dim, (k + 1) * self.hidden_dim)
        return self.w.data[:, cols], self.u.data[:, cols], self.b.data[cols]

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        """One update built from primitive ops; the reference for ``gru_scan``."""
        hd = self.hidden_dim
        xp = dm.matmul(x, self.w) + self.b
        hu = dm.matmul(h, self.u[:, : 2 * hd])
        z = dm.sigmoid(xp[..., :hd] + hu[..., :hd])
        r = dm.sigmoid(xp[..., hd : 2 * hd] + hu[..., hd:])
        cand = dm.tanh(xp[..., 2 * hd :] + dm.matmul(r * h, self.u[:, 2 * hd :]))
        return (1.0 - z) * h + z * cand


def gru_scan(cell: GruCell, inputs: Tensor, h0: Tensor | None = None) -> Tensor:
    """All hidden states of ``cell`` run over ``inputs``.

    Accepts ``[n, input_dim]`` or batched ``[B, n, input_dim]``; ``h0``
    defaults to zeros.
    """
    single = inputs.ndim == 2
    x = dm.reshape(inputs, (1,) + inputs.shape) if single else inputs
    if x.ndim != 3 or x.shape[1] == 0:
        raise ContractError(f"gru_scan needs a nonempty sequence, got shape {inputs.shape}")
    if x.shape[2] != cell.input_dim:
        raise ContractError(f"gru_scan: input width {x.shape[2]} != cell input_dim {cell.input_dim}")
    if h0 is None:
        h0 = Tensor(np.zeros((x.shape[0], cell.hidden_dim), dtype=x.dtype))
    elif h0.ndim == 1:
        h0 = dm.reshape(h0, (1, cell.hidden_dim)) if single else dm.add(
            Tensor(np.zeros((x.shape[0], cell.hidden_dim), dtype=x.dtype)), h0
        )
    out = dm.gru_scan_op(x, h0, cell.w, cell.u, cell.b)
    return dm.reshape(out, out.shape[1:]) if single else out
