"""Tensor plumbing shared by every trainable model: autodiff wrapper, Adam,
learning-rate schedule and the checkpoint container."""

from __future__ import annotations

import io
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

DTYPE = torch.float64
LOG_ZERO = -1e30
CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    """Raised when a forward pass produces a NaN or infinite loss."""

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message)
        self.node = node


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


def safe_log(x: torch.Tensor) -> torch.Tensor:
    """log(x) with exact zeros mapped to the LOG_ZERO sentinel."""
    return torch.where(x > 0, torch.log(x.clamp_min(1e-300)), torch.full_like(x, LOG_ZERO))


def _first_nonfinite_node(model: torch.nn.Module, run: Callable[[], Any]) -> str | None:
    found: list[str] = []
    handles = []

    def make_hook(name):
        def hook(_module, _inputs, output):
            if found:
                return
            outs = output if isinstance(output, (tuple, list)) else (output,)
            for out in outs:
                if isinstance(out, torch.Tensor) and out.is_floating_point():
                    if not torch.isfinite(out).all():
                        found.append(name or type(_module).__name__)
                        return
        return hook

    for name, module in model.named_modules():
        handles.append(module.register_forward_hook(make_hook(name)))
    try:
        with torch.no_grad():
            run()
    finally:
        for h in handles:
            h.remove()
    return found[0] if found else None


def forward_backward(model: torch.nn.Module, loss_fn: Callable[[torch.nn.Module], torch.Tensor]) -> float:
    """Evaluate ``loss_fn(model)``, backpropagate into ``.grad`` and return the loss.

    Gradients are zeroed first so every parameter ends with a populated grad
    (zeros for parameters the loss does not touch).
    """
    for p in model.parameters():
        p.grad = None
    loss = loss_fn(model)
    if not torch.isfinite(loss):
        node = _first_nonfinite_node(model, lambda: loss_fn(model))
        where = node if node is not None else "loss reduction"
        raise NonFiniteLossError(f"non-finite loss {loss.item()!r}; first non-finite node: {where}", node)
    loss.backward()
    for p in model.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    return float(loss.detach())


def make_adam(params, lr: float = 3e-4) -> torch.optim.Adam:
    # conventional defaults; the optimizer state (moments, step) lives in the returned object
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def adam_step(optimizer: torch.optim.Optimizer, lr: float) -> None:
    if lr == 0:
        warnings.warn("adam_step called with lr=0; parameters left unchanged", RuntimeWarning, stacklevel=2)
        return
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


def adam_step_count(optimizer: torch.optim.Optimizer) -> int:
    steps = [int(s["step"]) for s in optimizer.state.values() if "step" in s]
    return max(steps, default=0)


@dataclass(frozen=True)
class LRConfig:
    peak_lr: float = 3e-4
    warmup_steps: int = 1
    total_steps: int = 1

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ValueError(f"need 0 < warmup_steps <= total_steps, got {self.warmup_steps}, {self.total_steps}")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")


def lr_at(config: LRConfig, step: int) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to zero at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= config.total_steps:
        return 0.0
    if step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    progress = (step - config.warmup_steps) / span
    return 0.5 * config.peak_lr * (1.0 + math.cos(math.pi * progress))


def save_checkpoint(path: str | Path, model: torch.nn.Module, config: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param::{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"format_version": CHECKPOINT_VERSION, "config": config}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        state = {k[len("param::"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param::")}
    return state, meta["config"]


def finite_difference_check(
    fn: Callable[[], torch.Tensor], params: list[torch.Tensor], h: float = 1e-5, floor: float = 1e-6
) -> float:
    """Max relative error between autograd gradients and central differences.

    Relative error is |g - g_fd| / max(|g|, |g_fd|, floor) over all entries.
    """
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                a = gflat[i].item()
                denom = max(abs(a), abs(fd), floor)
                worst = max(worst, abs(a - fd) / denom)
    return worst
