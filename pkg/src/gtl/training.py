"""Minibatch training loop shared by all models (Adam + warmup/cosine lr)."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .numerics import LRConfig, NonFiniteLossError, adam_step, forward_backward, lr_at, make_adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Either ``steps`` or ``epochs`` fixes the run length; epochs count passes over the data."""

    steps: int | None = None
    epochs: float | None = None
    batch_size: int = 256
    peak_lr: float = 3e-4
    warmup_frac: float = 0.1
    seed: int = 0
    snapshot_every: int = 50

    def __post_init__(self):
        if (self.steps is None) == (self.epochs is None):
            raise ValueError("set exactly one of steps / epochs")
        if self.batch_size < 1 or self.peak_lr <= 0:
            raise ValueError("batch_size and peak_lr must be positive")
        if (self.steps is not None and self.steps < 0) or (self.epochs is not None and self.epochs < 0):
            raise ValueError("run length must be non-negative")

    def total_steps(self, n_items: int) -> int:
        if self.steps is not None:
            return self.steps
        per_epoch = math.ceil(n_items / min(self.batch_size, n_items))
        return int(round(self.epochs * per_epoch))


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, step: int, last_good_state: dict):
        super().__init__(message)
        self.step = step
        self.last_good_state = last_good_state


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    steps: int = 0


def fit(model: torch.nn.Module, n_items: int, loss_fn: Callable[[torch.nn.Module, torch.Tensor, torch.Generator], torch.Tensor],
        config: TrainConfig, on_diverge: Path | None = None) -> TrainResult:
    """Run Adam over shuffled minibatches of item indices.

    ``loss_fn(model, idx, generator)`` returns the scalar loss for the items ``idx``.
    On a non-finite loss the model is restored to the last snapshot and
    :class:`TrainingDiverged` is raised (after saving to ``on_diverge`` if given).
    """
    if n_items < 1:
        raise ValueError("empty training set")
    total = config.total_steps(n_items)
    result = TrainResult()
    if total == 0:
        return result
    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    batch = min(config.batch_size, n_items)
    warmup = max(1, int(round(config.warmup_frac * total)))
    # index k uses lr_at(k + 1) so neither the first nor the last update is a no-op
    schedule = LRConfig(config.peak_lr, warmup, total + 1)
    optimizer = make_adam([p for p in model.parameters() if p.requires_grad], config.peak_lr)
    model.train()
    snapshot = copy.deepcopy(model.state_dict())
    perm, cursor = torch.randperm(n_items, generator=gen), 0
    for k in range(total):
        if cursor + batch > n_items:
            perm, cursor = torch.randperm(n_items, generator=gen), 0
        idx = perm[cursor:cursor + batch]
        cursor += batch
        try:
            loss = forward_backward(model, lambda m: loss_fn(m, idx, gen))
        except NonFiniteLossError as err:
            model.load_state_dict(snapshot)
            model.eval()
            if on_diverge is not None:
                from .nets import save_model
                save_model(on_diverge, model, {"diverged_at_step": k})
            raise TrainingDiverged(f"training diverged at step {k}: {err}", k, snapshot) from err
        adam_step(optimizer, lr_at(schedule, k + 1))
        result.losses.append(loss)
        if config.snapshot_every and (k + 1) % config.snapshot_every == 0:
            snapshot = copy.deepcopy(model.state_dict())
    result.steps = total
    model.eval()
    return result
