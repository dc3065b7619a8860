"""Ratio-guided samplers: naive guided ancestral, cached top-n ancestral with the
mask-probability stabilizer, and the one-position-per-step planner sampler.

All samplers share the rng contract of ``diffusion.ancestral_sample``: every
sequence owns a numpy Generator and consumes one uniform per position per step
(planner: one per step), so variants can replay each other's trajectories.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import (DenoiserCache, NoiseSchedule, SamplerStats, draw_uniforms, inverse_cdf, remain_masked_prob,
                        sequence_rngs, time_grid, unguided_step)
from .numerics import DTYPE
from .planner import select_position

VARIANTS = ("naive", "topn", "planner")
RATIO_CHUNK = 4096


@dataclass(frozen=True)
class GuidanceConfig:
    """``gamma`` is a constant or a tuple of (t, gamma) knots interpolated linearly in t."""

    gamma: float | tuple = 1.0
    n_ratio: int | None = None
    stabilizer: bool = True
    variant: str = "topn"
    steps: int = 20

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.n_ratio is not None and self.n_ratio < 1:
            raise ValueError("n_ratio must be >= 1")
        if isinstance(self.gamma, (int, float)):
            if self.gamma < 0:
                raise ValueError("gamma must be >= 0")
        else:
            knots = tuple((float(t), float(g)) for t, g in self.gamma)
            if not knots or any(g < 0 or not 0 <= t <= 1 for t, g in knots):
                raise ValueError("gamma knots need t in [0, 1] and gamma >= 0")
            object.__setattr__(self, "gamma", tuple(sorted(knots)))

    def gamma_at(self, t: float) -> float:
        if isinstance(self.gamma, (int, float)):
            return float(self.gamma)
        ts, gs = zip(*self.gamma)
        return float(np.interp(t, ts, gs))

    def candidates(self, vocab_size: int) -> int:
        n = vocab_size if self.n_ratio is None else self.n_ratio
        if n > vocab_size:
            raise ValueError(f"n_ratio={n} exceeds vocabulary size {vocab_size}")
        return n

    @property
    def active(self) -> bool:
        if isinstance(self.gamma, (int, float)):
            return self.gamma > 0
        return any(g > 0 for _, g in self.gamma)


@dataclass
class SamplerModels:
    denoiser: object
    ratio: object | None = None
    planner: object | None = None


@dataclass
class StepRecord:
    """Per-sequence counters for one step."""

    masked: torch.Tensor
    ratio_calls: torch.Tensor
    fallbacks: int = 0


# --- single-position categoricals ----------------------------------------------------------------


def guided_token_posterior(base_probs: torch.Tensor, log_ratios: torch.Tensor, gamma: float) -> torch.Tensor:
    """Reweight ``base_probs`` by exp(gamma * log r) over the candidates (finite ``log_ratios``)
    and renormalize. Entries with log r = -inf are pruned."""
    base = torch.as_tensor(base_probs, dtype=DTYPE)
    lr = torch.as_tensor(log_ratios, dtype=DTYPE)
    cand = torch.isfinite(lr)
    if not (cand & (base > 0)).any():
        raise ValueError("guided posterior has empty support")
    centered = torch.where(cand, lr - lr[cand].max(), torch.zeros_like(lr))
    if cand.all() and (gamma == 0 or bool((centered == 0).all())):
        return base.clone()
    w = torch.where(cand, base * torch.exp(gamma * centered), torch.zeros_like(base))
    return w / w.sum()


def stabilized_renormalize(guided_probs: torch.Tensor, p_mask: float, fallback: torch.Tensor | None = None) -> torch.Tensor:
    """Fix P(mask) (last entry) to the unguided ``p_mask`` and split 1 - p_mask over the
    guided non-mask scores. Rows with no non-mask mass use ``fallback`` (the unguided
    non-mask distribution) and emit a warning."""
    g = torch.as_tensor(guided_probs, dtype=DTYPE)
    squeeze = g.dim() == 1
    g = g.reshape(-1, g.shape[-1])
    tokens = g[:, :-1]
    total = tokens.sum(dim=-1, keepdim=True)
    empty = (total <= 0).squeeze(-1) | ~torch.isfinite(total).squeeze(-1)
    if empty.any():
        if fallback is None:
            raise ValueError("no non-mask mass and no fallback distribution")
        warnings.warn(f"stabilizer fallback on {int(empty.sum())} position(s)", RuntimeWarning)
        fb = torch.as_tensor(fallback, dtype=DTYPE).reshape(-1, tokens.shape[-1])[:, :tokens.shape[-1]]
        fb = fb.expand(tokens.shape[0], -1)
        tokens = torch.where(empty[:, None], fb, tokens)
        total = tokens.sum(dim=-1, keepdim=True)
    out = torch.empty_like(g)
    out[:, :-1] = (1.0 - p_mask) * tokens / total
    out[:, -1] = p_mask
    return out[0] if squeeze else out


# --- batched helpers -----------------------------------------------------------------------------


@torch.no_grad()
def eval_log_ratio(ratio, seqs: torch.Tensor, sigma) -> torch.Tensor:
    """log r for many sequences, chunked; ``sigma`` is a float or a per-row tensor."""
    out = []
    for start in range(0, seqs.shape[0], RATIO_CHUNK):
        part = seqs[start:start + RATIO_CHUNK]
        sig = sigma[start:start + RATIO_CHUNK] if isinstance(sigma, torch.Tensor) and sigma.dim() else (
            torch.full((part.shape[0],), float(sigma), dtype=DTYPE))
        out.append(ratio.log_ratio(part, sig).to(DTYPE))
    return torch.cat(out) if out else torch.zeros(0, dtype=DTYPE)


def candidate_tokens(log_x: torch.Tensor, n: int) -> torch.Tensor:
    """Top-n token ids per row by denoiser log-prob, sorted ascending by id."""
    if n >= log_x.shape[-1]:
        return torch.arange(log_x.shape[-1]).expand(log_x.shape[0], -1)
    return torch.sort(torch.topk(log_x, n, dim=-1).indices, dim=-1).values


def _substitutions(z: torch.Tensor, rows: torch.Tensor, pos: torch.Tensor, cands: torch.Tensor) -> torch.Tensor:
    """[P * n, L] copies of z[rows] with position ``pos`` set to each candidate."""
    p, n = cands.shape
    seqs = z[rows].unsqueeze(1).repeat(1, n, 1)
    seqs[torch.arange(p)[:, None], torch.arange(n)[None, :], pos[:, None]] = cands
    return seqs.reshape(p * n, -1)


def guided_logits(log_x: torch.Tensor, cands: torch.Tensor, log_r: torch.Tensor, gamma: float) -> torch.Tensor:
    """Token logits log x + gamma * (log r - max log r) on candidates, -inf elsewhere."""
    centered = log_r - log_r.max(dim=-1, keepdim=True).values
    logits = torch.full_like(log_x, -torch.inf)
    logits.scatter_(-1, cands, log_x.gather(-1, cands) + gamma * centered)
    return logits


def _softmax_with_fallback(logits: torch.Tensor, log_x: torch.Tensor) -> tuple[torch.Tensor, int]:
    probs = torch.softmax(logits, dim=-1)
    bad = ~torch.isfinite(probs).all(dim=-1)
    if bad.any():
        warnings.warn(f"stabilizer fallback on {int(bad.sum())} position(s)", RuntimeWarning)
        probs[bad] = torch.softmax(log_x[bad], dim=-1)
    return probs, int(bad.sum())


def ancestral_guided_probs(z: torch.Tensor, log_x: torch.Tensor, rows: torch.Tensor, pos: torch.Tensor, ratio,
                           gamma: float, n_ratio: int, sigma) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Guided clean-token distributions at positions (rows, pos) with the stabilizer on.

    Returns ``(token_probs [P, N], ratio_calls_per_position [P], fallbacks)``; the
    stabilized categorical is (1 - p_mask) * token_probs plus p_mask on MASK.
    """
    lx = log_x[rows, pos]
    cands = candidate_tokens(lx, n_ratio)
    lr = eval_log_ratio(ratio, _substitutions(z, rows, pos, cands), sigma).reshape(cands.shape)
    probs, fallbacks = _softmax_with_fallback(guided_logits(lx, cands, lr, gamma), lx)
    return probs, torch.full((rows.shape[0],), cands.shape[1], dtype=torch.int64), fallbacks


# --- steps ---------------------------------------------------------------------------------------


def _ancestral_step(z, log_x, alpha_s, alpha_t, u, ratio, gamma, n_ratio, stabilizer, lazy, sigma):
    mask_id = log_x.shape[-1]
    b = z.shape[0]
    masked = z == mask_id
    record = StepRecord(masked.sum(dim=-1), torch.zeros(b, dtype=torch.int64))
    if gamma == 0 or ratio is None:
        return unguided_step(z, log_x, alpha_s, alpha_t, u, mask_id), record
    p_mask = remain_masked_prob(alpha_s, alpha_t)
    out = z.clone()
    if stabilizer:
        unmask = masked & (u >= p_mask)
        rows, pos = torch.nonzero(unmask if lazy else masked, as_tuple=True)
        if rows.numel() == 0:
            return out, record
        probs, calls, record.fallbacks = ancestral_guided_probs(z, log_x, rows, pos, ratio, gamma, n_ratio, sigma)
        record.ratio_calls.index_add_(0, rows, calls)
        sel = unmask[rows, pos]
        if sel.any():
            v = (u[rows, pos][sel] - p_mask) / (1.0 - p_mask)
            out[rows[sel], pos[sel]] = inverse_cdf(probs[sel], v)
        return out, record
    # stabilizer off: MASK competes as a candidate scored with r(z_t)
    active = masked.any(dim=-1)
    lr_stay = torch.zeros(b, dtype=DTYPE)
    if active.any():
        lr_stay[active] = eval_log_ratio(ratio, z[active], sigma)
        record.ratio_calls += active.to(torch.int64)
    rows, pos = torch.nonzero(masked, as_tuple=True)
    if rows.numel() == 0:
        return out, record
    lx = log_x[rows, pos]
    cands = candidate_tokens(lx, n_ratio)
    lr = eval_log_ratio(ratio, _substitutions(z, rows, pos, cands), sigma).reshape(cands.shape)
    record.ratio_calls.index_add_(0, rows, torch.full_like(rows, cands.shape[1]))
    top = torch.maximum(lr.max(dim=-1).values, lr_stay[rows])
    tok = torch.full_like(lx, -torch.inf)
    log_keep = math.log1p(-p_mask) if p_mask < 1 else -math.inf
    tok.scatter_(-1, cands, log_keep + torch.log_softmax(lx, dim=-1).gather(-1, cands) + gamma * (lr - top[:, None]))
    stay = (math.log(p_mask) if p_mask > 0 else -math.inf) + gamma * (lr_stay[rows] - top)
    full = torch.softmax(torch.cat([stay[:, None], tok], dim=-1), dim=-1)
    idx = inverse_cdf(full, u[rows, pos])
    hit = idx > 0
    out[rows[hit], pos[hit]] = idx[hit] - 1
    return out, record


def naive_guided_step(z: torch.Tensor, log_x: torch.Tensor, alpha_s: float, alpha_t: float, u: torch.Tensor,
                      ratio, gamma: float, stabilizer: bool = True, sigma=None) -> tuple[torch.Tensor, StepRecord]:
    """Guided ancestral step scoring every clean token at every masked position."""
    return _ancestral_step(z, log_x, alpha_s, alpha_t, u, ratio, gamma, log_x.shape[-1], stabilizer, False, sigma)


def topn_guided_step(z: torch.Tensor, log_x: torch.Tensor, alpha_s: float, alpha_t: float, u: torch.Tensor,
                     ratio, gamma: float, n_ratio: int, stabilizer: bool = True,
                     sigma=None) -> tuple[torch.Tensor, StepRecord]:
    """Guided ancestral step restricted to the denoiser's top-n tokens.

    With the stabilizer on the ratio is only evaluated where a position unmasks this
    step; whether it unmasks does not depend on the ratio, so this is exact.
    """
    return _ancestral_step(z, log_x, alpha_s, alpha_t, u, ratio, gamma, n_ratio, stabilizer, True, sigma)


def mask_fraction_sigma(masked_count: torch.Tensor, length: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise level whose masking rate matches the fraction of masked positions."""
    alpha = (1.0 - masked_count.to(DTYPE) / length).clamp(math.exp(-schedule.sigma_max), 1.0)
    return (-torch.log(alpha)).clamp(schedule.sigma_min, schedule.sigma_max)


def planner_guided_step(z: torch.Tensor, log_x: torch.Tensor, scores: torch.Tensor, u: torch.Tensor, ratio,
                        gamma: float, n_ratio: int, sigma=None) -> tuple[torch.Tensor, StepRecord]:
    """Unmask exactly one position per sequence (planner argmax), sampling its token from
    the guided top-n softmax. ``u`` holds one uniform per sequence."""
    mask_id = log_x.shape[-1]
    b = z.shape[0]
    masked = z == mask_id
    record = StepRecord(masked.sum(dim=-1), torch.zeros(b, dtype=torch.int64))
    pos = select_position(scores, z, mask_id)
    rows = torch.arange(b)
    lx = log_x[rows, pos]
    cands = candidate_tokens(lx, n_ratio)
    if gamma != 0 and ratio is not None:
        if isinstance(sigma, torch.Tensor) and sigma.dim():
            sigma = sigma.repeat_interleave(cands.shape[1])
        lr = eval_log_ratio(ratio, _substitutions(z, rows, pos, cands), sigma).reshape(cands.shape)
        record.ratio_calls += cands.shape[1]
        logits = guided_logits(lx, cands, lr, gamma).gather(-1, cands)
    else:
        logits = lx.gather(-1, cands)
    probs, record.fallbacks = _softmax_with_fallback(logits, lx.gather(-1, cands))
    out = z.clone()
    out[rows, pos] = cands.gather(-1, inverse_cdf(probs, u)[:, None]).squeeze(-1)
    return out, record


# --- drivers -------------------------------------------------------------------------------------


def _ceiling_ok(variant: str, record: StepRecord, vocab: int, n_ratio: int, stabilizer: bool, active: bool) -> torch.Tensor:
    """Per-sequence check of the per-step ratio-call ceilings."""
    calls, e = record.ratio_calls, record.masked
    if not active:
        return calls == 0
    extra = (e > 0).to(torch.int64) * (0 if stabilizer else 1)
    if variant == "naive":
        return calls == e * vocab + extra
    if variant == "topn":
        return calls <= e * n_ratio + extra
    return calls == n_ratio


def sample_guided(config: GuidanceConfig, models: SamplerModels, count: int | None = None, seed: int = 0,
                  length: int | None = None, schedule: NoiseSchedule = NoiseSchedule(),
                  rngs: list[np.random.Generator] | None = None, batch_size: int = 512, use_cache: bool = True,
                  trace: list | None = None, records: list | None = None,
                  block_stream: bool = False) -> tuple[torch.Tensor, SamplerStats]:
    """Draw mask-free sequences with the configured variant; returns ``(tokens, stats)``.

    By default every sequence owns an rng stream. ``block_stream=True`` instead draws
    each batch's uniforms from one generator seeded by ``seed`` (much cheaper for
    millions of draws; trajectories then depend on ``batch_size``).
    ``records`` (if given) collects one StepRecord per batch step for inspection.
    """
    den = models.denoiser
    vocab, mask_id = den.vocab_size, den.mask_id
    length = length or getattr(den, "length", None) or den.cfg.length
    n_ratio = config.candidates(vocab)
    if config.active and models.ratio is None:
        raise ValueError("guided sampling needs a ratio model (or gamma=0)")
    if config.variant == "planner" and models.planner is None:
        raise ValueError("planner variant needs a planner model")
    block = None
    if rngs is None:
        if count is None or count < 1:
            raise ValueError("count must be >= 1")
        if block_stream:
            block, rngs = np.random.default_rng(seed), [None] * count
        else:
            rngs = sequence_rngs(seed, count)

    def uniforms(chunk, width):
        if block is not None:
            return torch.from_numpy(block.random((len(chunk), width)))
        return draw_uniforms(chunk, width)

    outputs, stats = [], SamplerStats()
    for start in range(0, len(rngs), batch_size):
        chunk = rngs[start:start + batch_size]
        b = len(chunk)
        z = torch.full((b, length), mask_id, dtype=torch.int64)
        cache = DenoiserCache()
        part = SamplerStats(trajectories=b)
        if config.variant == "planner":
            for _ in range(length):
                u = uniforms(chunk, 1)[:, 0]
                k = (z == mask_id).sum(dim=-1)
                log_x = cache.lookup(den, z, mask_fraction_sigma(k, length, schedule))
                with torch.no_grad():
                    scores = models.planner.scores(z)
                part.planner_calls += b
                gamma = config.gamma_at(float(k.max()) / length)
                z, rec = planner_guided_step(z, log_x, scores, u, models.ratio, gamma, n_ratio,
                                             mask_fraction_sigma(k - 1, length, schedule))
                part = _account(part, rec, config, vocab, n_ratio, gamma > 0, records, trace, z)
            part.steps = length * b
            part.max_steps_per_trajectory = length
        else:
            grid = time_grid(schedule, config.steps)
            for i, (t, a_t, a_s) in enumerate(grid):
                u = uniforms(chunk, length)
                sigma_t = torch.tensor(schedule.sigma(t), dtype=DTYPE)
                t_next = grid[i + 1][0] if i + 1 < len(grid) else 0.0
                if use_cache:
                    log_x = cache.lookup(den, z, sigma_t)
                else:
                    log_x = DenoiserCache().lookup(den, z, sigma_t)
                    cache.calls = (cache.calls if cache.calls is not None else torch.zeros(b, dtype=torch.int64)) + 1
                gamma = config.gamma_at(t)
                step = naive_guided_step if config.variant == "naive" else topn_guided_step
                kwargs = {} if config.variant == "naive" else {"n_ratio": n_ratio}
                z, rec = step(z, log_x, a_s, a_t, u, models.ratio, gamma, stabilizer=config.stabilizer,
                              sigma=schedule.sigma(t_next), **kwargs)
                part = _account(part, rec, config, vocab, n_ratio, gamma > 0, records, trace, z)
            part.steps = config.steps * b
            part.max_steps_per_trajectory = config.steps
            bound = min(length, config.steps) + 1
            if use_cache and not den.time_conditioned:
                part.ceiling_violations += int((cache.calls > bound).sum())
        part.denoiser_calls = int(cache.calls.sum())
        part.cache_hits = cache.hits
        part.max_denoiser_calls_per_trajectory = int(cache.calls.max())
        if (z == mask_id).any():
            raise RuntimeError("sampler left masked positions")
        outputs.append(z)
        stats = stats.merge(part)
    return torch.cat(outputs), stats


def _account(part: SamplerStats, rec: StepRecord, config: GuidanceConfig, vocab: int, n_ratio: int, active: bool,
             records, trace, z) -> SamplerStats:
    part.ratio_calls += int(rec.ratio_calls.sum())
    part.stabilizer_fallbacks += rec.fallbacks
    ok = _ceiling_ok(config.variant, rec, vocab, n_ratio, config.stabilizer, active)
    part.ceiling_violations += int((~ok).sum())
    if records is not None:
        records.append(rec)
    if trace is not None:
        trace.append(z.clone())
    return part
