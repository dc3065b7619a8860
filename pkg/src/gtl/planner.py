"""Position planner: predicts where the frozen denoiser's argmax decode is correct."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, corrupt, stratified_times
from .nets import ModelConfig, build_model, freeze
from .numerics import DTYPE
from .training import TrainConfig, fit


def planner_labels(denoiser, x0: torch.Tensor, zt: torch.Tensor, sigma=None) -> torch.Tensor:
    """1 where the denoiser's argmax at z_t equals the clean token, else 0."""
    with torch.no_grad():
        log_x = denoiser.log_probs(zt, sigma if denoiser.time_conditioned else None)
    return (log_x.argmax(dim=-1) == x0).to(DTYPE)


def masked_bce(scores: torch.Tensor, labels: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Mean BCE-with-logits over masked positions; 0 (with a graph) when nothing is masked."""
    if not masked.any():
        return scores.sum() * 0.0
    return F.binary_cross_entropy_with_logits(scores[masked], labels[masked])


def planner_loss(planner, denoiser, x0: torch.Tensor, schedule: NoiseSchedule,
                 generator: torch.Generator | None = None, t: torch.Tensor | float | None = None) -> torch.Tensor:
    if t is None:
        t = stratified_times(x0.shape[0], generator)
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.dim() == 0:
        t = t.expand(x0.shape[0])
    zt = corrupt(x0, t, schedule, denoiser.mask_id, generator)
    labels = planner_labels(denoiser, x0, zt, schedule.sigma_t(t))
    return masked_bce(planner.scores(zt), labels, zt == denoiser.mask_id)


def train_planner(data: torch.Tensor, denoiser, model_cfg: ModelConfig, train_cfg: TrainConfig,
                  schedule: NoiseSchedule = NoiseSchedule()):
    if data.dim() != 2 or data.shape[0] == 0:
        raise ValueError("dataset must be a non-empty [n, L] tensor")
    model = build_model(model_cfg, seed=train_cfg.seed)
    result = fit(model, data.shape[0], lambda m, idx, g: planner_loss(m, denoiser, data[idx], schedule, g), train_cfg)
    return freeze(model), result


@torch.no_grad()
def planner_accuracy(planner, denoiser, data: torch.Tensor, schedule: NoiseSchedule = NoiseSchedule(),
                     t: float | None = None, seed: int = 0, labels_fn=None) -> float:
    """Fraction of masked positions where (score > 0) matches the denoiser-correct label.

    ``labels_fn(labels)`` may permute labels for sanity checks.
    """
    gen = torch.Generator().manual_seed(seed)
    n = data.shape[0]
    tt = torch.rand(n, generator=gen, dtype=DTYPE) if t is None else torch.full((n,), float(t), dtype=DTYPE)
    zt = corrupt(data, tt, schedule, denoiser.mask_id, gen)
    labels = planner_labels(denoiser, data, zt, schedule.sigma_t(tt))
    if labels_fn is not None:
        labels = labels_fn(labels)
    masked = zt == denoiser.mask_id
    if not masked.any():
        raise ValueError("no masked positions to score")
    pred = (planner.scores(zt) > 0).to(DTYPE)
    return float((pred[masked] == labels[masked]).to(DTYPE).mean())


def select_position(scores: torch.Tensor, z: torch.Tensor, mask_id: int) -> torch.Tensor:
    """Per row, the masked position with the highest score; ties go to the lowest index."""
    masked = z == mask_id
    if not masked.any(dim=-1).all():
        raise ValueError("every sequence needs at least one masked position")
    restricted = torch.where(masked, scores, torch.full_like(scores, -torch.inf))
    return torch.argmax(restricted, dim=-1)
