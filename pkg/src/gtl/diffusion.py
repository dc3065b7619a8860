"""Masked (absorbing-state) discrete diffusion: noise schedule, forward
corruption, true posterior, simplified NELBO and unguided ancestral sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .numerics import DTYPE


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric ("log-linear" in log sigma) schedule: sigma(t) = smin^(1-t) * smax^t."""

    sigma_min: float = 1e-4
    sigma_max: float = 20.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")

    @property
    def log_span(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def sigma(self, t: float) -> float:
        _check_time(t)
        return self.sigma_min ** (1.0 - t) * self.sigma_max ** t

    def alpha(self, t: float) -> float:
        return math.exp(-self.sigma(t))

    def dsigma(self, t: float) -> float:
        return self.sigma(t) * self.log_span

    def sigma_t(self, t: torch.Tensor) -> torch.Tensor:
        if torch.any((t < 0) | (t > 1)):
            raise ValueError("t outside [0, 1]")
        return self.sigma_min ** (1.0 - t) * self.sigma_max ** t

    def alpha_t(self, t: torch.Tensor) -> torch.Tensor:
        return torch.exp(-self.sigma_t(t))

    def t_from_sigma(self, sigma: float) -> float:
        sigma = min(max(sigma, self.sigma_min), self.sigma_max)
        return math.log(sigma / self.sigma_min) / self.log_span


def _check_time(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")


def alpha_at(schedule: NoiseSchedule, t: float) -> float:
    return schedule.alpha(t)


def corrupt(x0: torch.Tensor, t, schedule: NoiseSchedule, mask_id: int,
            generator: torch.Generator | None = None) -> torch.Tensor:
    """Keep each token independently with probability alpha_t, else replace it by MASK.

    ``t`` is a float or a per-sequence tensor of shape ``x0.shape[:1]``.
    """
    if torch.any(x0 == mask_id):
        raise ValueError("clean input contains mask tokens")
    t = torch.as_tensor(t, dtype=DTYPE)
    alpha = schedule.alpha_t(t)
    if alpha.dim() == 1:
        alpha = alpha[:, None]
    u = torch.rand(x0.shape, generator=generator, dtype=DTYPE)
    return torch.where(u < alpha, x0, torch.full_like(x0, mask_id))


def stratified_times(batch: int, generator: torch.Generator | None = None, eps: float = 1e-5) -> torch.Tensor:
    # one uniform offset shared by evenly spaced strata; keeps t away from the endpoints
    u = torch.rand(1, generator=generator, dtype=DTYPE)
    t = (u + torch.arange(batch, dtype=DTYPE) / batch) % 1.0
    return eps + (1 - 2 * eps) * t


def true_posterior(zt_token: int, x0_token: int, alpha_s: float, alpha_t: float, vocab_size: int) -> np.ndarray:
    """p(z_s | z_t, x0) for one position as a categorical over ids [0, N] (N = MASK)."""
    if alpha_s < alpha_t:
        raise ValueError("alpha_s must be >= alpha_t (s is earlier than t)")
    out = np.zeros(vocab_size + 1)
    if zt_token != vocab_size:
        out[zt_token] = 1.0
        return out
    if alpha_t >= 1.0:
        raise ValueError("masked token at alpha_t = 1 has no posterior")
    out[vocab_size] = (1 - alpha_s) / (1 - alpha_t)
    out[x0_token] += (alpha_s - alpha_t) / (1 - alpha_t)
    return out


def nelbo_terms(model, x0: torch.Tensor, zt: torch.Tensor, weight: torch.Tensor, sigma=None) -> torch.Tensor:
    """Per-sequence weighted NLL of the clean tokens at masked positions."""
    log_x = model.log_probs(zt, sigma)
    nll = -log_x.gather(-1, x0.unsqueeze(-1)).squeeze(-1)
    masked = zt == model.mask_id
    weight = torch.as_tensor(weight, dtype=DTYPE)
    if weight.dim() == 1:
        weight = weight[:, None]
    return (weight * nll * masked).sum(dim=-1)


def nelbo_loss(model, x0: torch.Tensor, schedule: NoiseSchedule, generator: torch.Generator | None = None,
               steps: int | None = None, t: torch.Tensor | None = None) -> torch.Tensor:
    """Monte-Carlo estimate of the simplified NELBO, averaged over the batch.

    With ``steps=T`` the time is snapped to the grid t_i = i/T and the weight
    T * (alpha_s - alpha_t) / (1 - alpha_t) makes the estimate unbiased for the
    T-term sum; with ``steps=None`` the continuous-time weight
    -alpha'_t / (1 - alpha_t) is used.
    """
    b = x0.shape[0]
    if t is None:
        t = stratified_times(b, generator)
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.dim() == 0:
        t = t.expand(b)
    if steps is not None:
        i = torch.clamp(torch.ceil(t * steps), 1, steps)
        t = i / steps
        a_t = schedule.alpha_t(t)
        a_s = schedule.alpha_t((i - 1) / steps)
        weight = steps * (a_s - a_t) / (1 - a_t)
    else:
        sig = schedule.sigma_t(t)
        a_t = torch.exp(-sig)
        weight = sig * schedule.log_span * a_t / (-torch.expm1(-sig))
    zt = corrupt(x0, t, schedule, model.mask_id, generator)
    sigma = schedule.sigma_t(t) if model.time_conditioned else None
    return nelbo_terms(model, x0, zt, weight, sigma).mean()


# --- reverse process primitives shared with guided sampling ---------------------------------


def time_grid(schedule: NoiseSchedule, steps: int) -> list[tuple[float, float, float]]:
    """(t, alpha_t, alpha_s) per reverse step from t=1 to 0; the last step forces alpha_s = 1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ts = np.linspace(1.0, 0.0, steps + 1)
    grid = []
    for i in range(steps):
        a_s = 1.0 if i == steps - 1 else schedule.alpha(float(ts[i + 1]))
        grid.append((float(ts[i]), schedule.alpha(float(ts[i])), a_s))
    return grid


def remain_masked_prob(alpha_s: float, alpha_t: float) -> float:
    return (1.0 - alpha_s) / (1.0 - alpha_t)


def inverse_cdf(probs: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Row-wise categorical draw from ``probs`` [M, K] using uniforms ``v`` [M].

    Zero-probability entries are never returned, even when rounding leaves v
    above the last cumulative value.
    """
    cdf = torch.cumsum(probs, dim=-1)
    idx = (cdf <= v[:, None]).sum(dim=-1)
    k = probs.shape[-1]
    positive = probs > 0
    last_pos = k - 1 - torch.argmax(positive.flip(-1).to(torch.int64), dim=-1)
    idx = torch.minimum(idx, last_pos)
    bad = ~positive.gather(-1, idx[:, None]).squeeze(-1)
    if bad.any():
        # v landed exactly on a cdf plateau; step forward to the next supported token
        for r in torch.nonzero(bad).flatten().tolist():
            nz = torch.nonzero(positive[r]).flatten()
            later = nz[nz >= idx[r]]
            idx[r] = later[0] if len(later) else nz[-1]
    return idx


def draw_uniforms(rngs: list[np.random.Generator], length: int) -> torch.Tensor:
    """One uniform per position per sequence, each sequence from its own stream."""
    return torch.from_numpy(np.stack([g.random(length) for g in rngs]))


def sequence_rngs(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


@dataclass
class SamplerStats:
    denoiser_calls: int = 0
    ratio_calls: int = 0
    planner_calls: int = 0
    cache_hits: int = 0
    steps: int = 0
    trajectories: int = 0
    stabilizer_fallbacks: int = 0
    ceiling_violations: int = 0
    max_denoiser_calls_per_trajectory: int = 0
    max_steps_per_trajectory: int = 0

    def merge(self, other: "SamplerStats") -> "SamplerStats":
        out = SamplerStats()
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            setattr(out, name, max(a, b) if name.startswith("max_") else a + b)
        return out

    def as_record(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class DenoiserCache:
    """Per-row logit cache; rows are recomputed only when their tokens changed.

    Exact for time-free denoisers. Time-conditioned denoisers bypass the cache.
    """

    tokens: torch.Tensor | None = None
    log_x: torch.Tensor | None = None
    calls: torch.Tensor | None = None
    hits: int = 0

    def lookup(self, denoiser, z: torch.Tensor, sigma=None) -> torch.Tensor:
        b = z.shape[0]
        if self.calls is None:
            self.calls = torch.zeros(b, dtype=torch.int64)
        if denoiser.time_conditioned or self.tokens is None:
            stale = torch.ones(b, dtype=torch.bool)
        else:
            stale = (self.tokens != z).any(dim=-1)
        if stale.all():
            log_x = _eval_denoiser(denoiser, z, sigma)
        else:
            log_x = self.log_x.clone()
            if stale.any():
                sig = sigma[stale] if isinstance(sigma, torch.Tensor) and sigma.dim() else sigma
                log_x[stale] = _eval_denoiser(denoiser, z[stale], sig)
        self.hits += int((~stale).sum())
        self.calls += stale.to(torch.int64)
        self.tokens = z.clone()
        self.log_x = log_x
        return log_x


def _eval_denoiser(denoiser, z, sigma):
    with torch.no_grad():
        return denoiser.log_probs(z, sigma if denoiser.time_conditioned else None)


def unguided_step(z: torch.Tensor, log_x: torch.Tensor, alpha_s: float, alpha_t: float,
                  u: torch.Tensor, mask_id: int) -> torch.Tensor:
    """One MDLM ancestral step for a batch given denoiser log-probs and per-position uniforms."""
    p_mask = remain_masked_prob(alpha_s, alpha_t)
    masked = z == mask_id
    unmask = masked & (u >= p_mask)
    out = z.clone()
    if unmask.any():
        probs = torch.softmax(log_x[unmask], dim=-1)
        v = (u[unmask] - p_mask) / (1.0 - p_mask)
        out[unmask] = inverse_cdf(probs, v)
    return out


def ancestral_sample(denoiser, schedule: NoiseSchedule, steps: int, length: int,
                     rngs: list[np.random.Generator], batch_size: int = 1024,
                     trace: list | None = None) -> tuple[torch.Tensor, SamplerStats]:
    """Unguided ancestral sampling from the all-MASK sequence; output contains no MASK."""
    mask_id = denoiser.mask_id
    outputs, stats = [], SamplerStats()
    for start in range(0, len(rngs), batch_size):
        chunk = rngs[start:start + batch_size]
        z = torch.full((len(chunk), length), mask_id, dtype=torch.int64)
        cache = DenoiserCache()
        for t, a_t, a_s in time_grid(schedule, steps):
            u = draw_uniforms(chunk, length)
            sigma = torch.tensor(schedule.sigma(t), dtype=DTYPE)
            log_x = cache.lookup(denoiser, z, sigma)
            z = unguided_step(z, log_x, a_s, a_t, u, mask_id)
            if trace is not None:
                trace.append(z.clone())
        outputs.append(z)
        stats = stats.merge(SamplerStats(
            denoiser_calls=int(cache.calls.sum()), cache_hits=cache.hits, steps=steps * len(chunk),
            trajectories=len(chunk), max_denoiser_calls_per_trajectory=int(cache.calls.max()),
            max_steps_per_trajectory=steps))
    return torch.cat(outputs), stats


# --- training --------------------------------------------------------------------------------


def train_denoiser(data: torch.Tensor, model_cfg, train_cfg, schedule: NoiseSchedule = NoiseSchedule(),
                   model=None, on_diverge=None):
    """Fit a denoiser to ``data`` [n, L] with the continuous-time NELBO.

    Returns ``(model, TrainResult)``; pass ``model`` to continue from existing weights.
    """
    from .nets import build_model
    from .training import fit

    if data.dim() != 2 or data.shape[0] == 0:
        raise ValueError("dataset must be a non-empty [n, L] tensor")
    if model is None:
        model = build_model(model_cfg, seed=train_cfg.seed)
    result = fit(model, data.shape[0], lambda m, idx, g: nelbo_loss(m, data[idx], schedule, g), train_cfg,
                 on_diverge=on_diverge)
    return model, result


def finetune(model, target_data: torch.Tensor, train_cfg, schedule: NoiseSchedule = NoiseSchedule(), on_diverge=None):
    """Continue training a copy of a pretrained denoiser on target data, all weights unfrozen."""
    import copy

    tuned = copy.deepcopy(model)
    for p in tuned.parameters():
        p.requires_grad_(True)
    return train_denoiser(target_data, tuned.cfg, train_cfg, schedule, model=tuned, on_diverge=on_diverge)


@torch.no_grad()
def validation_nelbo(model, data: torch.Tensor, schedule: NoiseSchedule, seed: int = 0, repeats: int = 4,
                     batch_size: int = 1024) -> float:
    """Average continuous-time NELBO over ``repeats`` corruption draws of ``data``."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for _ in range(repeats):
        for start in range(0, data.shape[0], batch_size):
            x = data[start:start + batch_size]
            total += float(nelbo_loss(model, x, schedule, gen)) * x.shape[0]
            count += x.shape[0]
    return total / count
