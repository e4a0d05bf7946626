"""Adamax, the warmup/plateau/decay schedule, and the training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import diffmath as dm
from .data import VqaExample
from .diffmath import Tensor
from .errors import ConfigError, ContractError, NumericError
from .model import VqaCoinModel, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class Adamax:
    """Adamax over a name -> parameter mapping.

    ``m <- b1 m + (1-b1) g``; ``u <- max(b2 u, |g|)``;
    ``theta <- theta - lr / (1 - b1^t) * m / (u + eps)``.
    """

    def __init__(self, params: Mapping[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.u = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        if not lr > 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
        self.t += 1
        scale = lr / (1.0 - self.beta1**self.t)
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            m = self.m[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            np.maximum(self.beta2 * self.u[name], np.abs(g), out=self.u[name])
            p.data -= scale * m / (self.u[name] + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim/m/{k}": v for k, v in self.m.items()}
        out.update({f"optim/u/{k}": v for k, v in self.u.items()})
        return out

    def load_state_arrays(self, t: int, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = arrays[f"optim/m/{k}"].copy()
            self.u[k] = arrays[f"optim/u/{k}"].copy()


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


@dataclass
class TrainSchedule:
    epochs: int = 18
    warmup_epochs: int = 4
    lr_start: float = 0.05e-3
    lr_plateau: float = 0.2e-3
    plateau_until_epoch: int = 10
    decay: float = 0.25
    decay_epochs: list[int] = field(default_factory=lambda: [12, 14, 15, 16, 17, 18])
    batch_size: int = 16
    grad_clip: float = 0.25
    classifier_only: bool = False

    def validate(self) -> "TrainSchedule":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 1 <= self.warmup_epochs <= self.plateau_until_epoch:
            raise ConfigError("need 1 <= warmup_epochs <= plateau_until_epoch")
        if not (0 < self.lr_start and 0 < self.lr_plateau and 0 < self.decay <= 1):
            raise ConfigError("learning rates must be positive and decay in (0, 1]")
        if any(e <= self.plateau_until_epoch for e in self.decay_epochs):
            raise ConfigError("decay epochs must come after the plateau")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        return self


def lr_at_epoch(schedule: TrainSchedule, epoch: int) -> float:
    """Linear warmup to the plateau, hold, then multiply by ``decay`` at each decay epoch.

    Warmup is interpolated in decimal and rounded once, so configured
    values like 0.05e-3 .. 0.2e-3 give the expected literals (0.15e-3, not
    its binary-arithmetic neighbour).
    """
    s = schedule
    if not 1 <= epoch <= s.epochs:
        raise ContractError(f"epoch {epoch} outside 1..{s.epochs}")
    if epoch <= s.warmup_epochs:
        if s.warmup_epochs == 1:
            return s.lr_plateau
        lo, hi = Decimal(repr(s.lr_start)), Decimal(repr(s.lr_plateau))
        return float(lo + (hi - lo) * (epoch - 1) / (s.warmup_epochs - 1))
    lr = s.lr_plateau
    for e in sorted(s.decay_epochs):
        if e <= epoch:
            lr *= s.decay
    return lr


@dataclass
class TrainResult:
    model: VqaCoinModel
    trace: list[dict]
    best_val: float | None = None


def train_loop(
    model: VqaCoinModel,
    examples: Sequence[VqaExample],
    schedule: TrainSchedule,
    seed: int = 0,
    val_examples: Sequence[VqaExample] | None = None,
    callbacks: Sequence[Callable[[dict], None]] = (),
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Train in place and return the per-epoch trace.

    Each epoch shuffles with ``default_rng((seed, epoch))`` and draws
    dropout masks from the same generator, so a resumed run continues the
    exact trace.  With ``out_dir`` the trace is appended to
    ``metrics.jsonl`` (without wall times, which go to ``timing.jsonl``
    so that identical runs leave identical metrics) and ``best.ckpt`` /
    ``last.ckpt`` are written.
    """
    from .evaluation import evaluate

    schedule.validate()
    if not examples:
        raise ContractError("training set is empty")
    net = model.net
    named = dict(net.named_parameters())
    if schedule.classifier_only:
        keep = {id(p) for p in net.classifier_parameters()}
        named = {k: p for k, p in named.items() if id(p) in keep}
    opt = Adamax(named)
    trace: list[dict] = []
    best_val = None
    first_epoch = 1

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume_from is None:
            for name in ("metrics.jsonl", "timing.jsonl"):
                (out / name).unlink(missing_ok=True)
    if resume_from is not None:
        state = load_checkpoint(resume_from, model.config)
        for name, p in net.named_parameters():
            p.data = dict(state.net.named_parameters())[name].data.copy()
        extra = state.checkpoint_meta["extra"]
        opt.load_state_arrays(extra["optimizer_t"], state.checkpoint_arrays)
        trace = [dict(r, wall_time=None) for r in extra["trace"]]
        best_val = extra.get("best_val")
        first_epoch = extra["epoch"] + 1

    encoded = model.encode(examples)
    all_params = net.parameters()
    for epoch in range(first_epoch, schedule.epochs + 1):
        started = time.perf_counter()
        lr = lr_at_epoch(schedule, epoch)
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(encoded))
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), schedule.batch_size)):
            batch = model.collate([encoded[i] for i in order[start : start + schedule.batch_size]])
            net.zero_grad()
            try:
                loss = model.loss(model.forward(batch, training=True, rng=rng), batch)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
            if not np.isfinite(loss.data).all():
                raise NumericError(f"epoch {epoch}, batch {b}: loss is not finite")
            dm.backward(loss, all_params)
            clip_grad_norm(named.values(), schedule.grad_clip)
            try:
                opt.step(lr)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
            total += loss.item() * len(batch)
            seen += len(batch)

        val_acc = evaluate(model, val_examples).overall if val_examples else None
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": total / seen,
            "val_accuracy": val_acc,
            "wall_time": round(time.perf_counter() - started, 3),
        }
        trace.append(record)
        log.info("epoch %d lr %.3g loss %.5f val %s", epoch, lr, record["train_loss"], val_acc)
        improved = val_acc is not None and (best_val is None or val_acc > best_val)
        if improved:
            best_val = val_acc
        if out is not None:
            timeless = [{k: v for k, v in r.items() if k != "wall_time"} for r in trace]
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(timeless[-1], sort_keys=True) + "\n")
            with open(out / "timing.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"epoch": epoch, "wall_time": record["wall_time"]}) + "\n")
            extra = {"epoch": epoch, "optimizer_t": opt.t, "trace": timeless, "best_val": best_val, "seed": seed}
            save_checkpoint(model, out / "last.ckpt", extra=extra, arrays=opt.state_arrays())
            if improved or val_acc is None:
                save_checkpoint(model, out / "best.ckpt", extra={"epoch": epoch, "val_accuracy": val_acc})
        for cb in callbacks:
            cb(dict(record))
    return TrainResult(model, trace, best_val)
