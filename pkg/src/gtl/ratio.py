"""Domain classifiers and the guidance-ratio network.

The clean classifier d(x0) and the time-dependent classifier d(x_t, t) output
P(source | input); the target domain carries label 0, so (1 - d) / d estimates
q/p. The ratio network regresses onto these classifier ratios.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, corrupt, stratified_times
from .nets import ModelConfig, build_model, freeze
from .numerics import DTYPE
from .training import TrainConfig, TrainResult, fit


@dataclass(frozen=True)
class RatioTrainConfig:
    lam: float = 0.1
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")


def classifier_ratio(d):
    """(1 - d) / d for d in (0, 1); accepts floats or tensors."""
    if isinstance(d, torch.Tensor):
        if torch.any((d <= 0) | (d >= 1)):
            raise ValueError("classifier output must lie in (0, 1)")
        return (1 - d) / d
    if not 0 < d < 1:
        raise ValueError(f"classifier output {d} outside (0, 1)")
    return (1 - d) / d


def ratio_from_logit(logit: torch.Tensor) -> torch.Tensor:
    # (1 - sigmoid(a)) / sigmoid(a) == exp(-a), without rounding sigmoid near 0 or 1
    return torch.exp(-logit)


def _check_domains(source: torch.Tensor, target: torch.Tensor) -> None:
    if source.dim() != 2 or target.dim() != 2 or source.shape[0] == 0 or target.shape[0] == 0:
        raise ValueError("classifier training needs non-empty source and target datasets")
    if source.shape[1] != target.shape[1]:
        raise ValueError("source and target sequence lengths differ")


def _labelled_batch(source, target, idx, gen, time_dependent, schedule, mask_id):
    """Balanced batch: the source items ``idx`` plus as many random target items."""
    tgt_idx = torch.randint(target.shape[0], (idx.shape[0],), generator=gen)
    x = torch.cat([source[idx], target[tgt_idx]])
    labels = torch.cat([torch.ones(idx.shape[0], dtype=DTYPE), torch.zeros(idx.shape[0], dtype=DTYPE)])
    sigma = None
    if time_dependent:
        t = stratified_times(x.shape[0], gen)
        x = corrupt(x, t, schedule, mask_id, gen)
        sigma = schedule.sigma_t(t)
    return x, labels, sigma


def classifier_loss(model, x, labels, sigma=None, label_smoothing: float = 0.0) -> torch.Tensor:
    smoothed = labels * (1 - label_smoothing) + 0.5 * label_smoothing
    return F.binary_cross_entropy_with_logits(model(x, sigma), smoothed)


def train_classifier(source: torch.Tensor, target: torch.Tensor, model_cfg: ModelConfig, train_cfg: TrainConfig,
                     time_dependent: bool = False, schedule: NoiseSchedule = NoiseSchedule(),
                     label_smoothing: float = 0.1):
    """Fit a source-vs-target classifier; returns ``(model, TrainResult)``."""
    _check_domains(source, target)
    if model_cfg.time_conditioned != time_dependent:
        raise ValueError("model_cfg.time_conditioned must match time_dependent")
    model = build_model(model_cfg, seed=train_cfg.seed)
    half = max(1, train_cfg.batch_size // 2)
    cfg = TrainConfig(steps=train_cfg.total_steps(source.shape[0]), batch_size=half, peak_lr=train_cfg.peak_lr,
                      warmup_frac=train_cfg.warmup_frac, seed=train_cfg.seed, snapshot_every=train_cfg.snapshot_every)

    def loss_fn(m, idx, gen):
        x, labels, sigma = _labelled_batch(source, target, idx, gen, time_dependent, schedule, model_cfg.mask_id)
        return classifier_loss(m, x, labels, sigma, label_smoothing)

    result = fit(model, source.shape[0], loss_fn, cfg)
    return freeze(model), result


@torch.no_grad()
def classifier_accuracy(model, source: torch.Tensor, target: torch.Tensor, schedule: NoiseSchedule = NoiseSchedule(),
                        t: float | None = None, seed: int = 0) -> float:
    """Balanced accuracy at threshold 0.5. Time-dependent models are probed at time ``t``
    (uniform random times when ``t`` is None)."""
    gen = torch.Generator().manual_seed(seed)
    accs = []
    for data, label in ((source, 1.0), (target, 0.0)):
        sigma = None
        x = data
        if model.time_conditioned:
            tt = torch.rand(data.shape[0], generator=gen, dtype=DTYPE) if t is None else torch.full(
                (data.shape[0],), float(t), dtype=DTYPE)
            x = corrupt(data, tt, schedule, model.mask_id, gen)
            sigma = schedule.sigma_t(tt)
        pred = (model(x, sigma) > 0).to(DTYPE)
        accs.append(float((pred == label).to(DTYPE).mean()))
    return 0.5 * (accs[0] + accs[1])


# --- ratio network ---------------------------------------------------------------------------


def ratio_loss_terms(r_model, source_x0: torch.Tensor, target_x0: torch.Tensor, d_clean, d_time,
                     schedule: NoiseSchedule, generator: torch.Generator | None = None,
                     source_targets: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """(guidance, cycle) mean-squared errors in ratio space.

    guidance: r(x_t, t) vs (1 - d(x0)) / d(x0) on corrupted source data.
    cycle:    r(x_t, t) vs (1 - d(x_t, t)) / d(x_t, t) on corrupted target data.
    ``source_targets`` may carry precomputed clean-classifier ratios for ``source_x0``.
    """
    mask_id = r_model.mask_id
    t_src = stratified_times(source_x0.shape[0], generator)
    xs_t = corrupt(source_x0, t_src, schedule, mask_id, generator)
    sig_src = schedule.sigma_t(t_src)
    if source_targets is None:
        with torch.no_grad():
            source_targets = ratio_from_logit(d_clean(source_x0))
    guidance = torch.mean((torch.exp(r_model(xs_t, sig_src)) - source_targets) ** 2)

    t_tgt = stratified_times(target_x0.shape[0], generator)
    xq_t = corrupt(target_x0, t_tgt, schedule, mask_id, generator)
    sig_tgt = schedule.sigma_t(t_tgt)
    with torch.no_grad():
        cycle_targets = ratio_from_logit(d_time(xq_t, sig_tgt))
    cycle = torch.mean((torch.exp(r_model(xq_t, sig_tgt)) - cycle_targets) ** 2)
    return guidance, cycle


def ratio_loss(r_model, source_x0, target_x0, d_clean, d_time, lam: float, schedule: NoiseSchedule,
               generator: torch.Generator | None = None, source_targets=None) -> torch.Tensor:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    guidance, cycle = ratio_loss_terms(r_model, source_x0, target_x0, d_clean, d_time, schedule, generator,
                                       source_targets)
    return guidance + lam * cycle


def train_ratio(source: torch.Tensor, target: torch.Tensor, d_clean, d_time, model_cfg: ModelConfig,
                train_cfg: TrainConfig, lam: float = 0.1, schedule: NoiseSchedule = NoiseSchedule()):
    """Fit the ratio network; epochs count passes over the source data.

    Each step pairs a source minibatch with ``min(batch, n_target)`` target items.
    """
    _check_domains(source, target)
    if not model_cfg.time_conditioned:
        raise ValueError("the ratio network must be time-conditioned")
    model = build_model(model_cfg, seed=train_cfg.seed)
    with torch.no_grad():
        src_targets = torch.cat([ratio_from_logit(d_clean(source[i:i + 4096]))
                                 for i in range(0, source.shape[0], 4096)])
    n_tgt = target.shape[0]
    tgt_batch = min(train_cfg.batch_size, n_tgt)

    def loss_fn(m, idx, gen):
        tgt_idx = torch.randperm(n_tgt, generator=gen)[:tgt_batch]
        return ratio_loss(m, source[idx], target[tgt_idx], d_clean, d_time, lam, schedule, gen,
                          source_targets=src_targets[idx])

    result: TrainResult = fit(model, source.shape[0], loss_fn, train_cfg)
    return freeze(model), result
